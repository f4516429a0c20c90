"""Compiled and pure reduction kernels must agree bit for bit."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfgflow import _backend, _kernels_py

compiled = pytest.importorskip("mfgflow._kernels")

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 70), st.integers(1, 5)), elements=finite))
def test_tree_sum_bit_identical(a):
    assert np.array_equal(compiled.tree_sum(a), _kernels_py.tree_sum(a))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 33), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
       st.integers(0, 2 ** 31))
def test_pair_contract_bit_identical(ni, m, P, E, Q, seed):
    rng = np.random.default_rng(seed)
    kern = rng.standard_normal((ni, m, P, E)) * 10 ** rng.uniform(-3, 3)
    z = rng.standard_normal((m, E, Q))
    assert np.array_equal(compiled.pair_contract(kern, z), _kernels_py.pair_contract(kern, z))


def test_pair_contract_matches_einsum():
    rng = np.random.default_rng(0)
    kern = rng.standard_normal((3, 17, 2, 2))
    z = rng.standard_normal((17, 2, 4))
    ref = np.einsum("ijpe,jeq->ipq", kern, z)
    np.testing.assert_allclose(_kernels_py.pair_contract(kern, z), ref, rtol=1e-12, atol=1e-12)


def test_tree_sum_empty_and_single():
    assert np.array_equal(_kernels_py.tree_sum(np.zeros((0, 3))), np.zeros(3))
    a = np.array([[1.5, -2.0]])
    assert np.array_equal(compiled.tree_sum(a), a[0])


def test_compiled_backend_selected():
    assert _backend.BACKEND == "compiled"


def test_pure_backend_by_environment():
    code = "from mfgflow import _backend; print(_backend.BACKEND)"
    env = dict(os.environ, MFGFLOW_PURE="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_read_only_inputs_accepted():
    kern = np.broadcast_to(np.arange(6.0).reshape(1, 3, 1, 2), (2, 3, 1, 2))
    z = np.ones((3, 2, 1))
    z.setflags(write=False)
    assert np.array_equal(compiled.pair_contract(kern, z), _kernels_py.pair_contract(kern, z))
