"""Shared fixtures and small simulation oracles used across the test suite."""

import numpy as np
import pytest

from stochpc.plant import LTISystem


def random_system(rng, n, m, p, rho=0.7, with_d=True) -> LTISystem:
    """Random system with spectral radius scaled to ``rho`` (a.s. minimal)."""
    A = rng.standard_normal((n, n))
    radius = max(abs(np.linalg.eigvals(A)))
    if radius > 0:
        A *= rho / radius
    B = rng.standard_normal((n, m))
    C = rng.standard_normal((p, n))
    D = rng.standard_normal((p, m)) if with_d else np.zeros((p, m))
    return LTISystem(A=A, B=B, C=C, D=D)


def rollout(sys: LTISystem, x0, u_seq, w_seq=None, v_seq=None):
    """Plain loop-based simulation; independent of the plant module's logging."""
    T = len(u_seq)
    n, p = sys.n, sys.p
    w_seq = np.zeros((T, n)) if w_seq is None else w_seq
    v_seq = np.zeros((T, p)) if v_seq is None else v_seq
    x = np.asarray(x0, dtype=float).copy()
    xs, ys = [], []
    for t in range(T):
        xs.append(x.copy())
        ys.append(sys.C @ x + sys.D @ u_seq[t] + v_seq[t])
        x = sys.A @ x + sys.B @ u_seq[t] + w_seq[t]
    return np.array(xs), np.array(ys)


@pytest.fixture
def nprng():
    return np.random.default_rng(20240817)
