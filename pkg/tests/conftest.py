"""Shared test oracles.

The finite-difference helper here is the independent check for every
backward pass; it deliberately lives in the test surface and never calls
into the tape machinery it verifies.
"""

import numpy as np
import pytest


def fd_grad(f, x, step=1e-5):
    """Entrywise central finite differences of a scalar-valued f(array)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + step
        hi = f(x)
        flat_x[i] = orig - step
        lo = f(x)
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2.0 * step)
    return g


def rel_err(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(float(np.linalg.norm(want)), 1e-12)
    return float(np.linalg.norm(got - want)) / denom


def unit_rows(rng, m, d):
    x = rng.normal(size=(m, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
