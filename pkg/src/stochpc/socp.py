"""Dense primal-dual interior-point solver for quadratic cone programs.

Solves::

    minimize    (1/2) x' P x + q' x + constant
    subject to  A x + s = b,   s in K

where K is an ordered product of zero, nonnegative-orthant and second-order
cones.  The KKT conditions are embedded in a homogeneous self-dual model so
that primal or dual infeasibility surfaces as a certificate instead of a
solver failure; proper cones are scaled with Nesterov-Todd points and the
search direction uses Mehrotra predictor-corrector steps with a 0.99
fraction-to-boundary rule.

The per-iteration KKT system is reduced to a (regularized) positive-definite
Schur complement and solved by dense Cholesky with one round of iterative
refinement against the unreduced system.  Problem data is Ruiz-equilibrated
once up front; all reported residuals refer to the original scaling.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg


class NumericalFailure(RuntimeError):
    """Unrecoverable KKT factorization breakdown or non-finite iterates."""


class ConeKind(enum.Enum):
    ZERO = "zero"
    NONNEG = "nonneg"
    SOC = "soc"


@dataclass(frozen=True)
class Cone:
    kind: ConeKind
    dim: int


def zero(dim: int) -> Cone:
    return Cone(ConeKind.ZERO, dim)


def nonneg(dim: int) -> Cone:
    return Cone(ConeKind.NONNEG, dim)


def soc(dim: int) -> Cone:
    return Cone(ConeKind.SOC, dim)


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"
    MAX_ITERATIONS = "max_iterations"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class ConicProgram:
    """Quadratic-objective cone program in slack form (A x + s = b, s in K)."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray
    cones: tuple[Cone, ...]
    constant: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "P", np.asarray(self.P, dtype=float))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).ravel())
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, dtype=float)))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).ravel())
        object.__setattr__(self, "cones", tuple(self.cones))

    def validate(self) -> None:
        d = self.q.size
        if self.P.shape != (d, d):
            raise ValueError(f"P must be {d}x{d}, got {self.P.shape}")
        scale = max(1.0, float(np.max(np.abs(self.P)))) if self.P.size else 1.0
        if np.max(np.abs(self.P - self.P.T)) > 1e-10 * scale:
            raise ValueError("P must be symmetric")
        if self.P.size and np.min(np.linalg.eigvalsh(0.5 * (self.P + self.P.T))) < -1e-10 * scale:
            raise ValueError("P must be positive semi-definite")
        if self.A.shape != (self.b.size, d):
            raise ValueError(f"A must be {self.b.size}x{d}, got {self.A.shape}")
        total = 0
        for cone in self.cones:
            if cone.dim < 1:
                raise ValueError("cone dims must be >= 1")
            if cone.kind is ConeKind.SOC and cone.dim < 2:
                raise ValueError("second-order cones need dim >= 2")
            total += cone.dim
        if total != self.b.size:
            raise ValueError(f"cone dims sum to {total}, expected {self.b.size}")

    @property
    def num_vars(self) -> int:
        return self.q.size

    @property
    def num_rows(self) -> int:
        return self.b.size

    def to_json_dict(self) -> dict:
        return {
            "P": self.P.tolist(),
            "q": self.q.tolist(),
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "cones": [[c.kind.value, c.dim] for c in self.cones],
            "constant": self.constant,
        }

    def dump(self, path) -> None:
        """Single-document JSON dump for cross-checking in external solvers."""
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)


@dataclass(frozen=True)
class Settings:
    tol_feas: float = 1e-8
    tol_gap: float = 1e-8
    tol_infeas: float = 1e-10
    max_iter: int = 200
    reg: float = 1e-9
    refine_steps: int = 1
    equilibrate: bool = True
    init_scale: float = 1.0


@dataclass
class Solution:
    x: np.ndarray
    s: np.ndarray
    z: np.ndarray
    status: SolveStatus
    iterations: int
    residuals: dict
    obj_val: float
    trace: list = field(default_factory=list)


def kkt_residuals(program: ConicProgram, x, s, z) -> dict:
    """Normalized primal/dual/gap residuals at a candidate triple."""
    x = np.asarray(x, dtype=float).ravel()
    s = np.asarray(s, dtype=float).ravel()
    z = np.asarray(z, dtype=float).ravel()
    primal = np.linalg.norm(program.A @ x + s - program.b) / (1.0 + np.linalg.norm(program.b))
    dual = np.linalg.norm(program.P @ x + program.q + program.A.T @ z) / (1.0 + np.linalg.norm(program.q))
    xPx = float(x @ (program.P @ x))
    gap = abs(xPx + program.q @ x + program.b @ z)
    return {"primal": float(primal), "dual": float(dual), "gap": float(gap)}


# ---------------------------------------------------------------------------
# cone-wise primitives
# ---------------------------------------------------------------------------

class _ConeLayout:
    """Index bookkeeping for the ordered cone product.

    Second-order cone rows are gathered into one flat index array with
    segment boundaries so every cone-wise operation runs as a handful of
    vectorized segment reductions instead of a Python loop per cone.
    """

    def __init__(self, cones):
        zero_idx, nonneg_idx, soc_idx = [], [], []
        seg_starts, seg_lens, heads = [], [], []
        offset = 0
        for cone in cones:
            stop = offset + cone.dim
            if cone.kind is ConeKind.ZERO:
                zero_idx.extend(range(offset, stop))
            elif cone.kind is ConeKind.NONNEG:
                nonneg_idx.extend(range(offset, stop))
            else:
                seg_starts.append(len(soc_idx))
                seg_lens.append(cone.dim)
                heads.append(len(soc_idx))
                soc_idx.extend(range(offset, stop))
            offset = stop
        self.rows = offset
        self.zero_idx = np.array(zero_idx, dtype=int)
        self.nonneg_idx = np.array(nonneg_idx, dtype=int)
        self.soc_idx = np.array(soc_idx, dtype=int)
        self.seg_starts = np.array(seg_starts, dtype=int)
        self.seg_lens = np.array(seg_lens, dtype=int)
        self.heads = np.array(heads, dtype=int)
        self.n_soc = len(seg_starts)
        self.degree = len(self.nonneg_idx) + self.n_soc
        self.rep_idx = np.repeat(np.arange(self.n_soc), self.seg_lens) \
            if self.n_soc else np.empty(0, dtype=int)
        # fast path: every row belongs to an SOC block, in natural order
        self.soc_contiguous = (len(zero_idx) == 0 and len(nonneg_idx) == 0
                               and self.rows == len(soc_idx))
        self.soc_bounds = [(int(a), int(a + l))
                           for a, l in zip(self.seg_starts, self.seg_lens)]

    def seg_sum(self, flat: np.ndarray) -> np.ndarray:
        return np.add.reduceat(flat, self.seg_starts)

    def rep(self, per_block: np.ndarray) -> np.ndarray:
        return per_block[self.rep_idx]

    def neg_tail(self, flat: np.ndarray) -> np.ndarray:
        """Apply J = diag(1, -I) block-wise to the gathered SOC rows."""
        out = -flat
        out[self.heads] = flat[self.heads]
        return out

    def identity(self) -> np.ndarray:
        e = np.zeros(self.rows)
        e[self.nonneg_idx] = 1.0
        e[self.soc_idx[self.heads]] = 1.0
        return e


class _Scaling:
    """Nesterov-Todd scaling of the proper cones at the current (s, z)."""

    def __init__(self, layout: _ConeLayout, s: np.ndarray, z: np.ndarray):
        self.layout = layout
        nn = layout.nonneg_idx
        self.w_nn = np.sqrt(s[nn] / z[nn]) if len(nn) else np.empty(0)
        if layout.n_soc:
            sf = s[layout.soc_idx]
            zf = z[layout.soc_idx]
            det_s = 2.0 * sf[layout.heads] ** 2 - layout.seg_sum(sf * sf)
            det_z = 2.0 * zf[layout.heads] ** 2 - layout.seg_sum(zf * zf)
            if np.min(det_s) <= 0 or np.min(det_z) <= 0:
                raise NumericalFailure("iterate left the cone interior")
            rs, rz = np.sqrt(det_s), np.sqrt(det_z)
            s_n = sf / layout.rep(rs)
            z_n = zf / layout.rep(rz)
            gamma = np.sqrt(np.maximum((1.0 + layout.seg_sum(s_n * z_n)) / 2.0, 1e-300))
            wbar = (s_n + layout.neg_tail(z_n)) / layout.rep(2.0 * gamma)
            wbar0 = wbar[layout.heads]
            u = wbar.copy()
            u[layout.heads] += 1.0
            u /= layout.rep(np.sqrt(2.0 * (wbar0 + 1.0)))
            self.eta = np.sqrt(rs / rz)             # per block
            self.wbar = wbar                         # gathered rows
            self.u = u
            self.Ju = layout.neg_tail(u)
        else:
            self.eta = np.empty(0)
            self.wbar = self.u = self.Ju = np.empty(0)
        self.lam = self.mul_W(z)

    # reflections (2 v v' - J) applied block-wise to gathered rows
    def _refl_flat(self, v: np.ndarray, flat: np.ndarray) -> np.ndarray:
        lay = self.layout
        out = 2.0 * v * lay.rep(lay.seg_sum(v * flat)) - lay.neg_tail(flat)
        return out

    def mul_W(self, vec: np.ndarray) -> np.ndarray:
        out = np.zeros_like(vec)
        lay = self.layout
        out[lay.nonneg_idx] = self.w_nn * vec[lay.nonneg_idx]
        if lay.n_soc:
            out[lay.soc_idx] = lay.rep(self.eta) * self._refl_flat(self.u, vec[lay.soc_idx])
        return out

    def mul_Winv(self, vec: np.ndarray) -> np.ndarray:
        out = np.zeros_like(vec)
        lay = self.layout
        out[lay.nonneg_idx] = vec[lay.nonneg_idx] / self.w_nn
        if lay.n_soc:
            out[lay.soc_idx] = self._refl_flat(self.Ju, vec[lay.soc_idx]) / lay.rep(self.eta)
        return out

    def mul_Wsq(self, vec: np.ndarray) -> np.ndarray:
        out = np.zeros_like(vec)
        lay = self.layout
        out[lay.nonneg_idx] = self.w_nn ** 2 * vec[lay.nonneg_idx]
        if lay.n_soc:
            out[lay.soc_idx] = lay.rep(self.eta ** 2) * self._refl_flat(self.wbar, vec[lay.soc_idx])
        return out

    def winv_matrix(self, A: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
        """W^{-1} A with zero-cone rows zeroed out.

        The second-order blocks are rank-one corrections of a sign flip, so
        each block costs one thin GEMV plus an outer product; ``out`` lets
        the caller reuse one M x d workspace across iterations.
        """
        lay = self.layout
        if out is None:
            out = np.empty_like(A)
        if len(lay.zero_idx):
            out[lay.zero_idx] = 0.0
        if len(lay.nonneg_idx):
            np.divide(A[lay.nonneg_idx], self.w_nn[:, None], out=out[lay.nonneg_idx])
        if lay.n_soc:
            soc_rows = lay.soc_idx if not lay.soc_contiguous else slice(None)
            A_soc = A if lay.soc_contiguous else A[lay.soc_idx]
            out_soc = out if lay.soc_contiguous else np.empty_like(A_soc)
            for blk_i, (lo, hi) in enumerate(lay.soc_bounds):
                blk = A_soc[lo:hi]
                Ju_blk = self.Ju[lo:hi]
                inv_eta = 1.0 / self.eta[blk_i]
                dot = Ju_blk @ blk
                target = out_soc[lo:hi]
                np.multiply(((2.0 * inv_eta) * Ju_blk)[:, None], dot[None, :], out=target)
                target[0] -= inv_eta * blk[0]
                target[1:] += inv_eta * blk[1:]
            if not lay.soc_contiguous:
                out[soc_rows] = out_soc
        return out


def _jordan_mul(layout: _ConeLayout, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    nn = layout.nonneg_idx
    out[nn] = a[nn] * b[nn]
    if layout.n_soc:
        af = a[layout.soc_idx]
        bf = b[layout.soc_idx]
        prod = layout.rep(af[layout.heads]) * bf + layout.rep(bf[layout.heads]) * af
        prod[layout.heads] = layout.seg_sum(af * bf)
        out[layout.soc_idx] = prod
    return out


def _jordan_solve(layout: _ConeLayout, lam: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Solve lam o u = d block-wise."""
    out = np.zeros_like(d)
    nn = layout.nonneg_idx
    out[nn] = d[nn] / lam[nn]
    if layout.n_soc:
        lf = lam[layout.soc_idx]
        df = d[layout.soc_idx]
        l0 = lf[layout.heads]
        d0 = df[layout.heads]
        det = 2.0 * l0 ** 2 - layout.seg_sum(lf * lf)
        u0 = (2.0 * l0 * d0 - layout.seg_sum(lf * df)) / det
        res = (df - layout.rep(u0) * lf) / layout.rep(l0)
        res[layout.heads] = u0
        out[layout.soc_idx] = res
    return out


def _step_to_boundary(layout: _ConeLayout, point: np.ndarray, direction: np.ndarray) -> float:
    """Largest step keeping ``point + alpha * direction`` in the cone product."""
    alpha = np.inf
    nn = layout.nonneg_idx
    if len(nn):
        neg = direction[nn] < 0
        if np.any(neg):
            alpha = min(alpha, float(np.min(-point[nn][neg] / direction[nn][neg])))
    if layout.n_soc:
        rho = point[layout.soc_idx]
        dlt = direction[layout.soc_idx]
        r0 = rho[layout.heads]
        d0 = dlt[layout.heads]
        c = 2.0 * r0 ** 2 - layout.seg_sum(rho * rho)
        if np.min(c) <= 0:
            return 0.0
        a = 2.0 * d0 ** 2 - layout.seg_sum(dlt * dlt)
        bq = 2.0 * (2.0 * r0 * d0 - layout.seg_sum(rho * dlt))
        best = np.full(layout.n_soc, np.inf)
        disc = bq * bq - 4.0 * a * c
        quad = (np.abs(a) > 1e-300) & (disc >= 0)
        if np.any(quad):
            root = np.sqrt(disc[quad])
            r_lo = (-bq[quad] - root) / (2.0 * a[quad])
            r_hi = (-bq[quad] + root) / (2.0 * a[quad])
            lo = np.where(r_lo > 0, r_lo, np.inf)
            hi = np.where(r_hi > 0, r_hi, np.inf)
            best[quad] = np.minimum(lo, hi)
        lin = (np.abs(a) <= 1e-300) & (bq < 0)
        best[lin] = np.minimum(best[lin], -c[lin] / bq[lin])
        edge = d0 < 0
        best[edge] = np.minimum(best[edge], -r0[edge] / d0[edge])
        alpha = min(alpha, float(np.min(best)))
    return float(alpha)


# ---------------------------------------------------------------------------
# equilibration
# ---------------------------------------------------------------------------

def _ruiz_equilibrate(P, q, A, b, layout: _ConeLayout, iters: int = 6):
    """Cone-aware Ruiz scaling; returns scaled data plus the diagonal scalers.

    Rows inside one second-order cone share a single scale so the cone
    geometry is preserved; the objective is additionally normalized by its
    own magnitude (argmin-invariant).
    """
    M, d = A.shape
    e = np.ones(M)
    f = np.ones(d)
    Pw = P.copy()
    Aw = A.copy()
    for _ in range(iters):
        if M:
            row_norm = np.max(np.abs(Aw), axis=1)
            if layout.n_soc:
                gathered = row_norm[layout.soc_idx]
                block_max = np.maximum.reduceat(gathered, layout.seg_starts)
                row_norm[layout.soc_idx] = layout.rep(block_max)
            row_norm[row_norm == 0] = 1.0
            re = 1.0 / np.sqrt(row_norm)
        else:
            re = np.ones(0)
        col_a = np.max(np.abs(Aw), axis=0) if M else np.zeros(d)
        col_p = np.max(np.abs(Pw), axis=0) if d else np.zeros(d)
        col_norm = np.maximum(col_a, col_p)
        col_norm[col_norm == 0] = 1.0
        rf = 1.0 / np.sqrt(col_norm)
        Aw = Aw * re[:, None] * rf[None, :]
        Pw = Pw * rf[:, None] * rf[None, :]
        e *= re
        f *= rf
    qw = q * f
    bw = b * e
    obj_scale = max(np.max(np.abs(qw)) if d else 0.0,
                    np.max(np.abs(Pw)) if d else 0.0, 1.0)
    Pw = Pw / obj_scale
    qw = qw / obj_scale
    return Pw, qw, Aw, bw, e, f, obj_scale


# ---------------------------------------------------------------------------
# KKT factorization (Schur-complement form)
# ---------------------------------------------------------------------------

class _KKTFactor:
    """Factorization of [[P, A'], [A, -W^2]] via the P + A' W^{-2} A Schur form.

    Zero-cone rows (W^2 = 0) are kept as explicit equality rows through a
    secondary Schur complement.  Static regularization ``reg`` is folded into
    both factors; ``solve`` applies iterative refinement against the
    unregularized augmented system.
    """

    def __init__(self, P, A, layout: _ConeLayout, scaling: _Scaling,
                 reg: float, refine_steps: int, workspace: Optional[dict] = None):
        self.P, self.A = P, A
        self.layout = layout
        self.scaling = scaling
        self.reg = reg
        self.refine_steps = refine_steps
        self.zero_idx = layout.zero_idx
        self.A0 = A[self.zero_idx] if len(self.zero_idx) else None
        if workspace is None:
            workspace = {}
        self.AT = workspace.get("AT")
        if self.AT is None:
            self.AT = np.ascontiguousarray(A.T)
            workspace["AT"] = self.AT
        buf = workspace.get("B")
        if buf is None or buf.shape != A.shape:
            buf = np.empty_like(A)
            workspace["B"] = buf

        B = scaling.winv_matrix(A, out=buf)  # zero rows are zeroed
        N = P + B.T @ B
        N[np.diag_indices_from(N)] += reg
        try:
            self.choN = scipy.linalg.cho_factor(N, lower=True, check_finite=False)
        except scipy.linalg.LinAlgError:
            N[np.diag_indices_from(N)] += 1e3 * reg
            try:
                self.choN = scipy.linalg.cho_factor(N, lower=True, check_finite=False)
            except scipy.linalg.LinAlgError as exc:
                raise NumericalFailure("KKT factorization failed twice") from exc
        if self.A0 is not None:
            T = self.A0 @ scipy.linalg.cho_solve(self.choN, self.A0.T, check_finite=False)
            T[np.diag_indices_from(T)] += reg
            try:
                self.choT = scipy.linalg.cho_factor(T, lower=True, check_finite=False)
            except scipy.linalg.LinAlgError as exc:
                raise NumericalFailure("equality-block factorization failed") from exc

    def _solve_once(self, rx, rz):
        # rhs1 = rx + A' W^{-2} rz accumulated over the proper-cone rows only
        rz_int = self.scaling.mul_Winv(self.scaling.mul_Winv(rz))
        rhs1 = rx + self.AT @ rz_int
        if self.A0 is not None:
            y = scipy.linalg.cho_solve(self.choN, rhs1, check_finite=False)
            t = self.A0 @ y - rz[self.zero_idx]
            dz0 = scipy.linalg.cho_solve(self.choT, t, check_finite=False)
            dx = scipy.linalg.cho_solve(self.choN, rhs1 - self.A0.T @ dz0, check_finite=False)
        else:
            dz0 = None
            dx = scipy.linalg.cho_solve(self.choN, rhs1, check_finite=False)
        dz = self.scaling.mul_Winv(self.scaling.mul_Winv(self.A @ dx - rz))
        if dz0 is not None:
            dz[self.zero_idx] = dz0
        return dx, dz

    def solve(self, rx, rz):
        dx, dz = self._solve_once(rx, rz)
        for _ in range(self.refine_steps):
            res_x = rx - (self.P @ dx + self.AT @ dz)
            res_z = rz - (self.A @ dx - self.scaling.mul_Wsq(dz))
            if len(self.zero_idx):
                res_z[self.zero_idx] = rz[self.zero_idx] - self.A[self.zero_idx] @ dx
            cx, cz = self._solve_once(res_x, res_z)
            dx = dx + cx
            dz = dz + cz
        return dx, dz


# ---------------------------------------------------------------------------
# main solve loop
# ---------------------------------------------------------------------------

def solve(program: ConicProgram, settings: Optional[Settings] = None,
          validate: bool = True) -> Solution:
    """Solve a quadratic cone program on the homogeneous self-dual embedding."""
    cfg = settings or Settings()
    if validate:
        program.validate()
    layout = _ConeLayout(program.cones)
    d = program.num_vars
    M = program.num_rows

    P0, q0, A0, b0 = program.P, program.q, program.A, program.b
    if cfg.equilibrate and M > 0 and d > 0:
        P, q, A, b, e_sc, f_sc, obj_sc = _ruiz_equilibrate(P0, q0, A0, b0, layout)
    else:
        P, q, A, b = P0.copy(), q0.copy(), A0.copy(), b0.copy()
        e_sc, f_sc, obj_sc = np.ones(M), np.ones(d), 1.0

    x = np.zeros(d)
    s = cfg.init_scale * layout.identity()
    z = s.copy()
    tau, kappa = 1.0, 1.0
    nu = layout.degree
    workspace: dict = {}
    A0T = np.ascontiguousarray(A0.T)
    norm_b0 = np.linalg.norm(b0)
    norm_q0 = np.linalg.norm(q0)

    def unscaled_candidates():
        x_u = f_sc * x
        z_u = e_sc * z * obj_sc
        s_u = s / e_sc if M else s.copy()
        return x_u, s_u, z_u

    best = None
    trace: list[dict] = []
    status = SolveStatus.MAX_ITERATIONS
    iterations = 0

    for it in range(cfg.max_iter):
        iterations = it
        r_x = P @ x + A.T @ z + q * tau
        r_z = s + A @ x - b * tau
        xPx = float(x @ (P @ x))
        r_tau = kappa + q @ x + b @ z + xPx / tau
        mu = (s @ z + tau * kappa) / (nu + 1)

        if not np.isfinite(mu) or not np.isfinite(r_tau):
            status = SolveStatus.NUMERICAL_FAILURE
            break

        # -- termination on unscaled quantities -----------------------------
        x_u, s_u, z_u = unscaled_candidates()
        x_hat, s_hat, z_hat = x_u / tau, s_u / tau, z_u / tau
        P0x = P0 @ x_hat
        xPx0 = float(x_hat @ P0x)
        res = {
            "primal": float(np.linalg.norm(A0 @ x_hat + s_hat - b0) / (1.0 + norm_b0)),
            "dual": float(np.linalg.norm(P0x + q0 + A0T @ z_hat) / (1.0 + norm_q0)),
            "gap": float(abs(xPx0 + q0 @ x_hat + b0 @ z_hat)),
        }
        pobj = 0.5 * xPx0 + q0 @ x_hat
        dobj = -0.5 * xPx0 - b0 @ z_hat
        gap_ok = res["gap"] <= cfg.tol_gap * max(1.0, min(abs(pobj), abs(dobj)))
        trace.append({"iter": it, "mu": mu, "tau": tau, "kappa": kappa,
                      "taukappa": tau * kappa, "primal": res["primal"],
                      "dual": res["dual"], "gap": res["gap"]})
        if res["primal"] <= cfg.tol_feas and res["dual"] <= cfg.tol_feas and gap_ok:
            status = SolveStatus.OPTIMAL
            best = (x_hat, s_hat, z_hat, res)
            break

        bz = b0 @ z_u
        if bz < -1e-14:
            cert = z_u / (-bz)
            amax = max(1.0, float(np.max(np.abs(A0))) if A0.size else 1.0)
            if np.max(np.abs(A0.T @ cert)) <= cfg.tol_infeas * amax * max(1.0, np.max(np.abs(cert))):
                status = SolveStatus.PRIMAL_INFEASIBLE
                best = (x_hat, s_hat, cert, res)
                break
        qx = q0 @ x_u
        if qx < -1e-14:
            ray = x_u / (-qx)
            sray = s_u / (-qx)
            pmax = max(1.0, float(np.max(np.abs(P0))) if P0.size else 1.0)
            amax = max(1.0, float(np.max(np.abs(A0))) if A0.size else 1.0)
            ray_mag = max(1.0, np.max(np.abs(ray)))
            if (np.max(np.abs(P0 @ ray)) <= cfg.tol_infeas * pmax * ray_mag
                    and np.max(np.abs(A0 @ ray + sray)) <= cfg.tol_infeas * amax * ray_mag):
                status = SolveStatus.DUAL_INFEASIBLE
                best = (ray, sray, z_hat, res)
                break

        # -- scaling, factorization ----------------------------------------
        scaling = _Scaling(layout, s, z)
        lam = scaling.lam
        factor = _KKTFactor(P, A, layout, scaling, cfg.reg, cfg.refine_steps)
        x1, z1 = factor.solve(-q, b)

        c_x = q + 2.0 * (P @ x) / tau

        def directions(dx_rhs, dz_eq, ds_rhs, dtau_rhs, dkappa_rhs):
            ds_tilde = _jordan_solve(layout, lam, ds_rhs)
            dz_tilde = dz_eq - scaling.mul_W(ds_tilde)
            if len(layout.zero_idx):
                dz_tilde[layout.zero_idx] = dz_eq[layout.zero_idx] + s[layout.zero_idx]
            x2, z2 = factor.solve(dx_rhs, dz_tilde)
            denom = c_x @ x1 + b @ z1 - kappa / tau - xPx / tau ** 2
            dtau = (dtau_rhs - dkappa_rhs / tau - c_x @ x2 - b @ z2) / denom
            dx = x2 + dtau * x1
            dz = z2 + dtau * z1
            ds = scaling.mul_W(ds_tilde - scaling.mul_W(dz))
            if len(layout.zero_idx):
                ds[layout.zero_idx] = -s[layout.zero_idx]
            dkappa = (dkappa_rhs - kappa * dtau) / tau
            return dx, dz, ds, dtau, dkappa

        lam_sq = _jordan_mul(layout, lam, lam)
        aff = directions(-r_x, -r_z, -lam_sq, -r_tau, -tau * kappa)
        dx_a, dz_a, ds_a, dtau_a, dkap_a = aff

        alpha_aff = min(
            1.0,
            _step_to_boundary(layout, s, ds_a),
            _step_to_boundary(layout, z, dz_a),
            tau / -dtau_a if dtau_a < 0 else np.inf,
            kappa / -dkap_a if dkap_a < 0 else np.inf,
        )
        mu_aff = ((s + alpha_aff * ds_a) @ (z + alpha_aff * dz_a)
                  + (tau + alpha_aff * dtau_a) * (kappa + alpha_aff * dkap_a)) / (nu + 1)
        sigma = min(max((mu_aff / mu) ** 3, 0.0), 1.0)

        corr = _jordan_mul(layout, scaling.mul_Winv(ds_a), scaling.mul_W(dz_a))
        ds_rhs = -lam_sq - corr + sigma * mu * layout.identity()
        dkap_rhs = -tau * kappa - dtau_a * dkap_a + sigma * mu
        comb = directions(-(1 - sigma) * r_x, -(1 - sigma) * r_z,
                          ds_rhs, -(1 - sigma) * r_tau, dkap_rhs)
        dx_c, dz_c, ds_c, dtau_c, dkap_c = comb

        alpha = min(
            1.0,
            0.99 * min(
                _step_to_boundary(layout, s, ds_c),
                _step_to_boundary(layout, z, dz_c),
                tau / -dtau_c if dtau_c < 0 else np.inf,
                kappa / -dkap_c if dkap_c < 0 else np.inf,
            ),
        )
        if not np.isfinite(alpha) or alpha <= 0:
            status = SolveStatus.NUMERICAL_FAILURE
            break

        x = x + alpha * dx_c
        z = z + alpha * dz_c
        s = s + alpha * ds_c
        tau += alpha * dtau_c
        kappa += alpha * dkap_c
        if tau <= 0 or kappa < 0 or not np.all(np.isfinite(x)):
            status = SolveStatus.NUMERICAL_FAILURE
            break
    else:
        iterations = cfg.max_iter

    if best is None:
        x_u, s_u, z_u = unscaled_candidates()
        best = (x_u / tau, s_u / tau, z_u / tau,
                kkt_residuals(program, x_u / tau, s_u / tau, z_u / tau))
    x_fin, s_fin, z_fin, res_fin = best
    obj = float(0.5 * x_fin @ (program.P @ x_fin) + program.q @ x_fin + program.constant)
    return Solution(x=x_fin, s=s_fin, z=z_fin, status=status,
                    iterations=iterations, residuals=res_fin,
                    obj_val=obj, trace=trace)
