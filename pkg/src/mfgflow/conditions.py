"""Closed-form structural conditions on the declared model constants.

Three parameter inequalities guarantee global solvability of the
equilibrium system; a fourth (the cone condition) guarantees a unique
minimizer of the Lagrangian in a cone ``|p| <= K (1 + |x| + W2(m, delta_0))``.
All inequalities are strict; a margin of exactly zero fails.
"""
from dataclasses import asdict, dataclass, field
import math

import numpy as np

from .measures import w2_to_dirac


@dataclass
class ConditionRow:
    name: str
    lhs: float
    rhs: float
    margin: float
    passed: bool
    evaluable: bool = True
    reason: str = ""

    def to_dict(self):
        d = asdict(self)
        d["pass"] = d.pop("passed")
        for k in ("lhs", "rhs", "margin"):
            if d[k] is not None and not math.isfinite(d[k]):
                d[k] = None
        return d


@dataclass
class ConditionReport:
    property_S: list
    cone_condition: ConditionRow
    cone_K: object
    c1: float
    c2: float
    notes: list = field(default_factory=list)

    @property
    def property_S_pass(self):
        return all(r.passed for r in self.property_S)

    @property
    def all_pass(self):
        return self.property_S_pass and self.cone_condition.passed

    def to_dict(self):
        return {
            "property_S": [r.to_dict() for r in self.property_S],
            "cone_condition": self.cone_condition.to_dict(),
            "cone_K": self.cone_K,
            "c1": self.c1,
            "c2": self.c2,
            "all_pass": self.all_pass,
            "notes": list(self.notes),
        }


def c1_c2(L, lambda_b, n):
    """The two auxiliary constants entering the parameter inequalities.

    Parameters
    ----------
    L, lambda_b : float
        Positive.
    n : int
        State dimension, at least 1.

    Returns
    -------
    (float, float)
    """
    if not (L > 0 and lambda_b > 0 and n >= 1):
        raise ValueError(f"need L > 0, lambda_b > 0, n >= 1 (got {L}, {lambda_b}, {n})")
    r = L * L / lambda_b
    c1 = r * (1.0 + r)
    c2 = 4.0 * L * math.sqrt((n * L / lambda_b) * (1.0 + r) * (1.0 + (L * L * (1.0 + n * L) / lambda_b) * (1.0 + r)))
    return c1, c2


def _row(name, lhs, rhs):
    margin = lhs - rhs
    return ConditionRow(name, float(lhs), float(rhs), float(margin), bool(margin > 0))


def check_property_S(c):
    """Evaluate the three parameter inequalities.

    Parameters
    ----------
    c : AssumptionConstants

    Returns
    -------
    list of ConditionRow
        Rows for the terminal, state and control inequalities.
    """
    if not (c.lambda_b > 0 and c.lambda_v > 0):
        raise ValueError("lambda_b and lambda_v must be positive")
    L = c.L
    c1, c2 = c1_c2(L, c.lambda_b, c.n) if L > 0 else (0.0, 0.0)
    rows = [_row("terminal: 2*lambda_g > L_g", 2 * c.lambda_g, c.L_g)]

    gap_g = 2 * c.lambda_g - c.L_g
    lhs2 = 2 * c.lambda_x
    rhs2 = c.L_f0 + 2 * L * L * c.L_b0 / c.lambda_b + 2 * c1 * c.l_b_m + math.sqrt(2) * c2 * c.l_sigma_m
    name2 = "state: 2*lambda_x > L_f0 + 2L^2 L_b0/lambda_b + 2 c1 l_b + sqrt2 c2 l_sigma + 3nL^2 l_sigma^2/(2 lambda_g - L_g)"
    if c.l_sigma_m > 0:
        if gap_g <= 0:
            rows.append(ConditionRow(name2, float(lhs2), math.inf, -math.inf, False, True,
                                     "2*lambda_g - L_g <= 0 makes the diffusion term undefined"))
        else:
            rhs2 += 3 * c.n * L * L * c.l_sigma_m ** 2 / gap_g
            rows.append(_row(name2, lhs2, rhs2))
    else:
        rows.append(_row(name2, lhs2, rhs2))

    name3 = "control: 2*lambda_v > L^2 L_b2/lambda_b + (L_f1 + 3L^2 L_b1/lambda_b + c1 l_b + c2 l_sigma)/(2 sqrt(state margin))"
    r2 = rows[1]
    if not r2.passed:
        rows.append(ConditionRow(name3, 2 * c.lambda_v, math.nan, math.nan, False, False,
                                 "not evaluable: the state inequality fails, so its square root is undefined"))
    else:
        num = c.L_f1 + 3 * L * L * c.L_b1 / c.lambda_b + c1 * c.l_b_m + c2 * c.l_sigma_m
        rhs3 = L * L * c.L_b2 / c.lambda_b + num / (2 * math.sqrt(r2.margin))
        rows.append(_row(name3, 2 * c.lambda_v, rhs3))
    return rows


def check_cone_condition(c):
    """Cone condition and cone constant.

    Returns
    -------
    (ConditionRow, float or None)
        ``K`` is None when ``2 lambda_v lambda_b <= L^3``.
    """
    if not (c.lambda_b > 0 and c.lambda_v > 0):
        raise ValueError("lambda_b and lambda_v must be positive")
    L, lb, lv = c.L, c.lambda_b, c.lambda_v
    lhs = 2 * lv
    rhs = (L * L / lb) * (L + c.L_b2 + L * c.L_b2 / (2 * lv))
    row = _row("cone: 2*lambda_v > (L^2/lambda_b)(L + L_b2 + L L_b2/(2 lambda_v))", lhs, rhs)
    if 2 * lv * lb <= L ** 3:
        row.passed = False
        row.reason = "2*lambda_v*lambda_b <= L^3: cone constant undefined"
        return row, None
    K = (L * L / lb) * (1 + L / (2 * lv)) / (1 - L ** 3 / (2 * lv * lb))
    return row, float(K)


def in_cone(x, m, p, K):
    """Whether ``|p| <= K (1 + |x| + W2(m, delta_0))`` (boundary included)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    return bool(np.linalg.norm(p) <= K * (1 + np.linalg.norm(x) + w2_to_dirac(m)))


def condition_report(c):
    """Full report for a set of constants."""
    rows = check_property_S(c)
    cone, K = check_cone_condition(c)
    if c.L > 0:
        c1, c2 = c1_c2(c.L, c.lambda_b, c.n)
    else:
        c1 = c2 = 0.0
    notes = []
    if K is None:
        notes.append("cone constant undefined")
    return ConditionReport(rows, cone, K, c1, c2, notes)


def linear_reduction_margins(c):
    """Margins of the reduced inequalities for distribution-free linear drift.

    With ``l_b = l_sigma = L_b0 = L_b1 = L_b2 = 0`` the three inequalities
    become ``2 lambda_g > L_g``, ``2 lambda_x > L_f0`` and
    ``2 lambda_v > L_f1 / (2 sqrt(2 lambda_x - L_f0))``.
    """
    m1 = 2 * c.lambda_g - c.L_g
    m2 = 2 * c.lambda_x - c.L_f0
    m3 = 2 * c.lambda_v - c.L_f1 / (2 * math.sqrt(m2)) if m2 > 0 else math.nan
    return m1, m2, m3
