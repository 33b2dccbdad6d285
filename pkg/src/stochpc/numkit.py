"""Dense matrix kernels shared by the rest of the package.

Block Hankel/Toeplitz assembly, truncated pseudo-inverses, Tikhonov-regularized
least squares, a fixed-point Riccati solver for steady-state observer design,
and symmetric PSD square roots.  All functions operate on plain ``numpy``
arrays (row-major, float64) and are pure: no shared mutable state, safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class DareDiverged(RuntimeError):
    """Fixed-point Riccati iteration failed to converge.

    Usually signals a detectability or stabilizability failure of the
    supplied (A, C, Sw) triple.
    """


class RankError(ValueError):
    """A matrix required to have full rank is numerically rank deficient."""


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float array and reject non-finite entries."""
    out = np.atleast_2d(np.asarray(M, dtype=float))
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite entries")
    return out


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def block_hankel(signal: np.ndarray, depth: int) -> np.ndarray:
    """Block Hankel matrix of a vector-valued signal.

    Args:
        signal: Array of shape (T, d) — or (T,) for scalar signals — holding
            T samples of a d-vector signal.
        depth: Window length K; column j stacks samples j .. j+K-1.

    Returns:
        Array of shape (d*K, T-K+1).
    """
    sig = np.asarray(signal, dtype=float)
    if sig.ndim == 1:
        sig = sig[:, None]
    T, d = sig.shape
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if T < depth:
        raise ValueError(f"signal length {T} shorter than depth {depth}")
    cols = T - depth + 1
    H = np.empty((d * depth, cols))
    for j in range(cols):
        H[:, j] = sig[j:j + depth, :].ravel()
    return H


def block_toeplitz(blocks) -> np.ndarray:
    """Lower block-triangular Toeplitz matrix from blocks M_1, ..., M_k.

    Block (i, j) equals M_{i-j+1} for i >= j and zero above the diagonal,
    so the first block column reads col(M_1, ..., M_k).
    """
    mats = [as_matrix(b, f"block {i}") for i, b in enumerate(blocks)]
    if not mats:
        raise ValueError("need at least one block")
    q, r = mats[0].shape
    for i, b in enumerate(mats):
        if b.shape != (q, r):
            raise ValueError(f"block {i} has shape {b.shape}, expected {(q, r)}")
    k = len(mats)
    out = np.zeros((k * q, k * r))
    for i in range(k):
        for j in range(i + 1):
            out[i * q:(i + 1) * q, j * r:(j + 1) * r] = mats[i - j]
    return out


def pinv(M: np.ndarray, rank_tol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via SVD.

    Singular values below ``rank_tol`` times the largest singular value are
    truncated to zero.
    """
    A = as_matrix(M, "pinv input")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((A.shape[1], A.shape[0]))
    keep = s > rank_tol * s[0]
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (Vt.T * inv_s) @ U.T


def tikhonov_dagger(W: np.ndarray, lam: float) -> np.ndarray:
    """Regularized left inverse (W'W + lam*I)^{-1} W'.

    For ``lam == 0`` this is the least-squares inverse and W must have full
    column rank; a Cholesky failure of the normal matrix raises RankError.
    """
    A = as_matrix(W, "tikhonov input")
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    h = A.shape[1]
    normal = A.T @ A + lam * np.eye(h)
    try:
        cho = scipy.linalg.cho_factor(normal, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise RankError(
            "normal matrix not positive definite; W is column-rank "
            "deficient and lam == 0 provides no regularization"
        ) from exc
    return scipy.linalg.cho_solve(cho, A.T)


@dataclass(frozen=True)
class DareSolution:
    """Steady-state solution of the estimation Riccati equation.

    Attributes:
        sigma: PSD state-estimate error variance.
        gain: Observer gain A @ sigma @ C' (C @ sigma @ C' + Sv)^{-1}.
        iterations: Fixed-point iterations used.
    """

    sigma: np.ndarray
    gain: np.ndarray
    iterations: int


def solve_dare(
    A: np.ndarray,
    C: np.ndarray,
    Sw: np.ndarray,
    Sv: np.ndarray,
    tol: float = 1e-13,
    max_iter: int = 10_000,
) -> DareSolution:
    """Steady-state variance and gain of the one-step-ahead observer.

    Iterates ``S <- A S A' - A S C'(C S C' + Sv)^{-1} C S A' + Sw`` from
    ``S = Sw`` until the max-abs update drops below ``tol``, symmetrizing
    every iterate to suppress drift.  Convergence requires (A, C) detectable
    and (A, Sw) stabilizable; non-convergence raises DareDiverged.
    """
    A = as_matrix(A, "A")
    C = as_matrix(C, "C")
    Sw = symmetrize(as_matrix(Sw, "Sw"))
    Sv = symmetrize(as_matrix(Sv, "Sv"))
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"A must be square, got {A.shape}")
    if C.shape[1] != n:
        raise ValueError(f"C has {C.shape[1]} columns, expected {n}")

    S = Sw.copy()
    for it in range(1, max_iter + 1):
        ASC = A @ S @ C.T
        innov = C @ S @ C.T + Sv
        gain = scipy.linalg.solve(innov, ASC.T, assume_a="pos").T
        S_next = symmetrize(A @ S @ A.T - gain @ ASC.T + Sw)
        delta = np.max(np.abs(S_next - S))
        S = S_next
        if delta <= tol:
            ASC = A @ S @ C.T
            innov = C @ S @ C.T + Sv
            gain = scipy.linalg.solve(innov, ASC.T, assume_a="pos").T
            return DareSolution(sigma=S, gain=gain, iterations=it)
    raise DareDiverged(
        f"no fixed point after {max_iter} iterations (last update {delta:.3e}); "
        "check detectability of (A, C) and stabilizability of (A, Sw)"
    )


def dare_residual(A, C, Sw, Sv, sol: DareSolution) -> float:
    """Max-abs residual of the defining fixed-point equations."""
    S, L = sol.sigma, sol.gain
    res_sigma = (A - L @ C) @ S @ A.T + Sw - S
    res_gain = L @ (C @ S @ C.T + Sv) - A @ S @ C.T
    return max(np.max(np.abs(res_sigma)), np.max(np.abs(res_gain)))


def psd_sqrt(M: np.ndarray, sym_tol: float = 1e-10) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalues below zero (roundoff-level negatives) are clamped to zero.
    Raises ValueError when the input is asymmetric beyond ``sym_tol``.
    """
    A = as_matrix(M, "psd_sqrt input")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if np.max(np.abs(A - A.T)) > sym_tol * scale:
        raise ValueError("input is not symmetric within tolerance")
    w, V = np.linalg.eigh(symmetrize(A))
    w = np.clip(w, 0.0, None)
    return symmetrize((V * np.sqrt(w)) @ V.T)


def kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Kronecker product of two matrices."""
    return np.kron(as_matrix(A, "A"), as_matrix(B, "B"))
