"""Command-line entry point.

Usage::

    mfgflow <command> --config run.json [--out DIR] [--threads K]

Commands: ``check``, ``solve-mfg``, ``solve-control``, ``flows``,
``master-residual``, ``bench-lq``. Exit codes: 0 success, 2 a structural
condition fails, 3 a solver did not converge, 4 the configuration is
invalid (nothing is written). ``MFG_SEED`` and ``MFG_THREADS`` override the
``seed`` and ``threads`` keys of a valid configuration.
"""
import argparse
import csv
import json
import math
import os
import sys
from importlib import resources

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import flows as F
from .conditions import condition_report
from .fbsde import SolverConfig, SolverError, solve_control_frozen, solve_mfg, value_estimate
from .hamiltonian import MinimizerError
from .master import dx_value, master_residual
from .measures import EmpiricalMeasure
from .model import CapabilityError, ModelError, TimeGrid, generate_paths, model_from_spec
from .riccati import RiccatiError, solve_riccati

COMMANDS = ("check", "solve-mfg", "solve-control", "flows", "master-residual", "bench-lq")
EXIT_OK, EXIT_CONDITION, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3, 4
# stream of the generator used for the initial cloud, apart from the noise
LAW_STREAM = 1


class ConfigError(ValueError):
    """The run configuration is invalid."""


def load_schema(name):
    text = resources.files("mfgflow").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(doc, name, error=ConfigError):
    """Validate ``doc`` against a packaged schema; raises ``error``."""
    try:
        jsonschema.validate(doc, load_schema(name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise error(f"{name}: {where}: {exc.message}") from None


def _env_int(name):
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from None


def load_config(path, threads=None):
    """Read, validate and apply environment overrides."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    validate(doc, "config")
    seed = _env_int("MFG_SEED")
    if seed is not None:
        doc["seed"] = seed
    env_threads = _env_int("MFG_THREADS")
    if env_threads is not None:
        doc["threads"] = env_threads
    if threads is not None:
        doc["threads"] = threads
    if doc.get("threads", 1) < 1 or doc["seed"] < 0:
        raise ConfigError("threads must be positive and seed nonnegative")
    return doc


def solver_config(doc):
    grid = doc.get("grid", {})
    s = dict(doc.get("solver", {}))
    s.pop("flow_tol", None)
    try:
        return SolverConfig(N=doc.get("particles", 2000), K=grid.get("K", 50), T=grid.get("T", 1.0),
                            seed=doc["seed"], threads=doc.get("threads", 1), **s)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def initial_law(doc, n):
    """Initial cloud: seeded normal draws or explicit points."""
    law = doc.get("initial_law", {"kind": "normal"})
    N = doc.get("particles", 2000)
    if law.get("kind", "normal") == "points":
        pts = np.asarray(law["points"], dtype=np.float64).reshape(-1, n)
        return EmpiricalMeasure(pts)
    z = generate_paths(TimeGrid(0.0, 1.0, 1), N, doc["seed"], dim=n, stream=LAW_STREAM).increments[:, 0]
    mean = np.broadcast_to(np.asarray(law.get("mean", 0.0), dtype=np.float64), (n,))
    return EmpiricalMeasure(mean + float(law.get("std", 1.0)) * z)


def probe_points(doc, n):
    xs = doc.get("probes", {}).get("x", [[0.0] * n])
    out = []
    for x in xs:
        a = np.asarray(x, dtype=np.float64).reshape(-1)
        if a.size == 1:
            a = np.full(n, a[0])
        if a.size != n:
            raise ConfigError(f"probe point {x} does not have dimension {n}")
        out.append(a)
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out(ctx, name):
    return os.path.join(ctx["out"], name)


# --------------------------------------------------------------------------
# commands


def cmd_check(ctx):
    model = ctx["model"]
    rep = condition_report(model.constants)
    doc = {"model": model.name, "constants": model.constants.to_dict(), **rep.to_dict()}
    validate(_jsonable(doc), "check_report", RuntimeError)
    write_json(_out(ctx, "check.json"), doc)
    ctx["artifacts"].append("check.json")
    return EXIT_OK if rep.all_pass else EXIT_CONDITION


def _solve_mfg(ctx):
    if "mfg" not in ctx:
        ctx["mfg"] = solve_mfg(ctx["model"], ctx["t"], ctx["mu0"], ctx["config"])
    return ctx["mfg"]


def cmd_solve_mfg(ctx):
    sol = _solve_mfg(ctx)
    sol.to_csv(_out(ctx, "mfg_trajectories.csv"))
    ctx["artifacts"].append("mfg_trajectories.csv")
    ctx["solver"] = sol.summary()
    return EXIT_OK


def _player(ctx, x):
    mfg = _solve_mfg(ctx)
    return solve_control_frozen(ctx["model"], ctx["t"], x, mfg.measure_flow, mfg.dB, ctx["config"],
                                warm_fields=mfg.fields)


def cmd_solve_control(ctx):
    x = ctx["probes"][0]
    sol = _player(ctx, x)
    sol.to_csv(_out(ctx, "control_trajectories.csv"))
    ctx["artifacts"].append("control_trajectories.csv")
    ctx["solver"] = {"equilibrium": ctx["mfg"].summary(), "control": sol.summary(), "x": x}
    return EXIT_OK


def _direction(kind, xi):
    if kind == "square":
        return xi ** 2
    if kind == "identity":
        return xi.copy()
    return np.ones_like(xi)


def cmd_flows(ctx):
    doc = ctx["doc"]
    probes = doc.get("probes", {})
    tol = doc.get("solver", {}).get("flow_tol", F.FLOW_TOL)
    mfg = _solve_mfg(ctx)
    model = ctx["model"]
    xsol = _player(ctx, ctx["probes"][0])
    eta = _direction(probes.get("eta", "ones"), mfg.X[0])
    bundle = F.FlowBundle(mfg, x_solution=xsol)
    bundle.jacobian = F.jacobian_x(mfg, tol=tol)
    dec = F.decompose_gateaux(mfg, eta=eta, tol=tol)
    bundle.gateaux = {"xi": dec.direct, "measure_part": dec.measure_part,
                      "mu": F.gateaux_mu(xsol, mfg, eta, dec.measure_part, tol)}
    kf = F.kernel_flows(mfg, ygrid=probes.get("ygrid", 32), x_solution=xsol,
                        companion_count=probes.get("companions"), tol=tol)
    bundle.kernel = kf
    summary = {"decomposition_residual": dec.residual, "lifting": F.lifting_check(mfg, eta, kf, xsol, tol),
               "ygrid": kf["ygrid"].points, "ygrid_weights": kf["ygrid"].weights}
    if probes.get("hessian", True) and model.has_third_derivatives:
        bundle.hessian = F.hessian_x(mfg, tol=tol)
        bundle.kernel_y = F.kernel_flow_yderiv(mfg, kflows=kf, x_solution=xsol, tol=tol)
    bundle.particles = range(min(mfg.N, probes.get("export_particles", 16)))
    for path in bundle.to_csv(ctx["out"]):
        ctx["artifacts"].append(os.path.basename(path))
    summary["sweeps"] = {name: fl.sweeps for name, fl in _named_flows(bundle)}
    summary["condition_residual"] = {name: fl.condition_residual for name, fl in _named_flows(bundle)}
    write_json(_out(ctx, "flows_summary.json"), summary)
    ctx["artifacts"].append("flows_summary.json")
    ctx["solver"] = mfg.summary()
    return EXIT_OK


def _named_flows(bundle):
    out = []
    if bundle.jacobian is not None:
        out.append(("jacobian_x", bundle.jacobian))
    if bundle.hessian is not None:
        out.append(("hessian_x", bundle.hessian))
    for k, fl in bundle.gateaux.items():
        out.append((f"gateaux_{k}", fl))
    for group, tag in ((bundle.kernel, ""), (bundle.kernel_y, "_y")):
        for k in ("xi", "mu"):
            if group is not None and k in group:
                out.append((f"kernel_{k}{tag}", group[k]))
    return sorted(out)


def cmd_master_residual(ctx):
    doc = ctx["doc"]
    probes = doc.get("probes", {})
    pts = ctx["probes"]
    rep = master_residual(ctx["model"], ctx["t"], pts[0], ctx["mu0"], ctx["config"],
                          delta=probes.get("delta_t", 0.025), probes=pts[1:], ygrid_size=probes.get("ygrid", 32),
                          companion_count=probes.get("companions"))
    body = _jsonable(rep.to_dict())
    validate(body, "master_report", RuntimeError)
    write_json(_out(ctx, "master_report.json"), body)
    ctx["artifacts"].append("master_report.json")
    return EXIT_OK


BENCH_COLUMNS = ["quantity", "x", "solver", "reference", "max_rel_err"]


def _rel(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = float(np.max(np.abs(b)))
    err = float(np.max(np.abs(a - b)))
    return err / scale if scale > 0 else err


def cmd_bench_lq(ctx):
    if ctx["doc"]["model"]["family"] != "lq":
        raise ConfigError("bench-lq needs the lq model family")
    model, cfg, t = ctx["model"], ctx["config"], ctx["t"]
    mfg = _solve_mfg(ctx)
    ref = solve_riccati(model, mfg.grid, mean0=ctx["mu0"].mean)
    rows = []
    worst = 0.0
    for k in range(mfg.grid.K + 1):
        worst = max(worst, _rel(mfg.P[k], ref.dx_value(k, mfg.X[k])))
    rows.append(["adjoint_path", "cloud", float(np.max(np.abs(mfg.P))), None, worst])
    for x in ctx["probes"]:
        ve = value_estimate(model, t, x, ctx["mu0"], cfg, mfg=mfg)
        dxV, dxxV = dx_value(ve.frozen)
        label = " ".join(repr(float(a)) for a in x)
        vref = float(ref.value(0, x[None])[0])
        rows.append(["value", label, ve.value, vref, _rel(ve.value, vref)])
        gref = ref.dx_value(0, x[None])[0]
        rows.append(["dx_value", label, float(np.linalg.norm(dxV)), float(np.linalg.norm(gref)), _rel(dxV, gref)])
        href = ref.dxx_value(0)
        rows.append(["dxx_value", label, float(np.linalg.norm(dxxV)), float(np.linalg.norm(href)), _rel(dxxV, href)])
    with open(_out(ctx, "bench_lq.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1]] + ["" if v is None else repr(float(v)) for v in r[2:]])
    ctx["artifacts"].append("bench_lq.csv")
    ctx["solver"] = {"max_rel_err": max(r[4] for r in rows)}
    return EXIT_OK


HANDLERS = {
    "check": cmd_check,
    "solve-mfg": cmd_solve_mfg,
    "solve-control": cmd_solve_control,
    "flows": cmd_flows,
    "master-residual": cmd_master_residual,
    "bench-lq": cmd_bench_lq,
}


def _context(command, doc, out):
    try:
        model = model_from_spec(doc["model"])
    except (ModelError, TypeError) as exc:
        raise ConfigError(f"model: {exc}") from None
    cfg = solver_config(doc)
    t = float(doc.get("grid", {}).get("t", 0.0))
    if t >= cfg.T:
        raise ConfigError("grid.t must be smaller than grid.T")
    probes = probe_points(doc, model.n)
    mu0 = initial_law(doc, model.n)
    return {"command": command, "doc": doc, "out": out, "model": model, "config": cfg, "t": t,
            "mu0": mu0, "probes": probes, "artifacts": []}


def run(command, config_path, out=None, threads=None):
    """Execute one command; returns the exit code."""
    if command not in HANDLERS:
        print(f"error: unknown command {command!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        doc = load_config(config_path, threads)
        if doc.get("command", command) != command:
            raise ConfigError(f"config is for {doc['command']!r}, not {command!r}")
        out = out or doc.get("output") or "."
        ctx = _context(command, doc, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(out, exist_ok=True)
    diag = {"command": command, "config": doc}
    try:
        with threadpool_limits(limits=doc.get("threads", 1)):
            code = HANDLERS[command](ctx)
        diag["status"] = "ok" if code == EXIT_OK else "condition_failure"
    except ConfigError as exc:
        # configuration problems found late (e.g. an unsupported family) leave no artifacts
        for name in ctx["artifacts"]:
            os.remove(os.path.join(out, name))
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, F.FlowError, MinimizerError, RiccatiError, FloatingPointError) as exc:
        code = EXIT_SOLVER
        diag["status"] = "not_converged"
        diag["error"] = f"{type(exc).__name__}: {exc}"
        if getattr(exc, "diagnostics", None):
            diag["solver"] = exc.diagnostics
        print(f"solver error: {exc}", file=sys.stderr)
    except CapabilityError as exc:
        code = EXIT_SOLVER
        diag["status"] = "not_converged"
        diag["error"] = f"{type(exc).__name__}: {exc}"
        print(f"capability error: {exc}", file=sys.stderr)
    diag["exit_code"] = code
    if "solver" in ctx and "solver" not in diag:
        diag["solver"] = ctx["solver"]
    diag["artifacts"] = sorted(ctx["artifacts"]) + ["diagnostics.json"]
    body = _jsonable(diag)
    validate(body, "diagnostics", RuntimeError)
    write_json(os.path.join(out, "diagnostics.json"), body)
    return code


def build_parser():
    p = argparse.ArgumentParser(prog="mfgflow", description="Particle solvers for second-order mean field games.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (default: config 'output' or the working directory)")
    p.add_argument("--threads", type=int, help="worker threads for linear algebra")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return run(args.command, args.config, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
