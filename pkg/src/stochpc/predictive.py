"""Shared receding-horizon engine for the model-based and data-driven controllers.

One generic implementation covers both instantiations: the true plant model
(state dimension n) and the data-built auxiliary model (dimension n_aux).
Per controller it precomputes the steady-state observer gains, the response
operators that express every in-window input/output as an affine function of
the policy parameters, and a compressed representation of the risk-tightened
second-order cone constraints.  Per control window only the current state
mean and reference slice are folded in, the cone program is solved, and the
first N_c policies are played against the plant while the observer tracks
innovations.

The feedback policy is ``u_t = ubar_t + sum_{s<t} M[s -> t] nu_s`` with the
nominal inputs and the strictly-lower-triangular gain blocks as joint
decision variables; diagonal blocks are pinned to zero so the policy stays
causal even with direct feedthrough.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import numkit, socp
from .datadriven import AuxModel
from .plant import LTISystem


class InfeasibleAfterBackup(RuntimeError):
    """Both the estimate-mean and the backup-mean programs were infeasible."""


# ---------------------------------------------------------------------------
# model containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateSpaceModel:
    """Abstract (A, B, C, D, Sw, Sv) shape shared by plant and auxiliary model."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Sw: np.ndarray
    Sv: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "D", "Sw", "Sv"):
            object.__setattr__(self, name, numkit.as_matrix(getattr(self, name), name))
        if np.min(np.linalg.eigvalsh(numkit.symmetrize(self.Sv))) <= 0:
            raise ValueError("Sv must be positive definite")

    @property
    def s_dim(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]


def model_from_plant(sys: LTISystem, Sw, Sv) -> StateSpaceModel:
    return StateSpaceModel(A=sys.A, B=sys.B, C=sys.C, D=sys.D, Sw=Sw, Sv=Sv)


def model_from_aux(aux: AuxModel) -> StateSpaceModel:
    return StateSpaceModel(A=aux.A_aux, B=aux.B_aux, C=aux.C_aux, D=aux.Dmat,
                           Sw=aux.Sw_aux, Sv=aux.Sv)


@dataclass(frozen=True)
class EstimatorGains:
    Sx: np.ndarray
    Lgain: np.ndarray


def compute_gains(model: StateSpaceModel, tol: float = 1e-13,
                  max_iter: int = 100_000) -> EstimatorGains:
    """Steady-state observer variance and gain; Sx doubles as the state-mean
    uncertainty at every control step."""
    sol = numkit.solve_dare(model.A, model.C, model.Sw, model.Sv,
                            tol=tol, max_iter=max_iter)
    return EstimatorGains(Sx=sol.sigma, Lgain=sol.gain)


# ---------------------------------------------------------------------------
# response operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeltaSet:
    """Stacked response operators over an N-step window.

    DU/DY map the gain-block concatenation into input/output deviations,
    DA propagates the uncertainty vector eta = col(x_k - mu, w, v) into
    outputs, and DM maps eta into the stacked innovations.  Block row i of
    each stack (DU_i etc.) belongs to window offset i.
    """

    DU: np.ndarray   # mN x mN (identity)
    DY: np.ndarray   # pN x mN
    DA: np.ndarray   # pN x n_eta
    DM: np.ndarray   # pN x n_eta
    N: int
    m: int
    p: int
    s_dim: int
    Theta: np.ndarray  # pN x s: nominal response to the initial mean

    @property
    def n_eta(self) -> int:
        return self.DA.shape[1]

    def du(self, i: int) -> np.ndarray:
        return self.DU[i * self.m:(i + 1) * self.m]

    def dy(self, i: int) -> np.ndarray:
        return self.DY[i * self.p:(i + 1) * self.p]

    def da(self, i: int) -> np.ndarray:
        return self.DA[i * self.p:(i + 1) * self.p]


def _observability_stack(C: np.ndarray, A: np.ndarray, N: int) -> np.ndarray:
    blocks = []
    Ak = np.eye(A.shape[0])
    for _ in range(N):
        blocks.append(C @ Ak)
        Ak = Ak @ A
    return np.vstack(blocks)


def _convolution_stack(C: np.ndarray, A: np.ndarray, N: int) -> np.ndarray:
    """Toep(0, C, CA, ..., C A^{N-2}) of shape pN x sN."""
    p, s = C.shape
    out = np.zeros((p * N, s * N))
    powers = [C]
    for _ in range(N - 2):
        powers.append(powers[-1] @ A)
    for i in range(N):
        for j in range(i):
            out[i * p:(i + 1) * p, j * s:(j + 1) * s] = powers[i - 1 - j]
    return out


def build_deltas(model: StateSpaceModel, gains: EstimatorGains, N: int) -> DeltaSet:
    """Assemble the window response operators for horizon N."""
    if N < 1:
        raise ValueError("N must be >= 1")
    s, m, p = model.s_dim, model.m, model.p
    A, B, C, D, L = model.A, model.B, model.C, model.D, gains.Lgain

    Theta = _observability_stack(C, A, N)
    Xi = _convolution_stack(C, A, N)
    AL = A - L @ C
    ThetaL = _observability_stack(C, AL, N)
    XiL = _convolution_stack(C, AL, N)

    DU = np.eye(m * N)
    # response of outputs to input deviations includes the direct feedthrough
    DY = Xi @ np.kron(np.eye(N), B) + np.kron(np.eye(N), D)
    DA = np.hstack([Theta, Xi, np.eye(p * N)])
    DM = np.hstack([ThetaL, XiL, np.eye(p * N) - XiL @ np.kron(np.eye(N), L)])
    return DeltaSet(DU=DU, DY=DY, DA=DA, DM=DM, N=N, m=m, p=p, s_dim=s, Theta=Theta)


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

Mblocks = dict  # (t, s) -> m x p array, 0 <= s < t <= N-1 (window offsets)


@dataclass
class PolicySolution:
    """Nominal inputs plus strictly-lower-triangular feedback gain blocks."""

    ubar: np.ndarray          # N x m
    blocks: Mblocks
    objective: float
    solver_iterations: int = 0
    solver_status: str = "optimal"
    active_constraints: tuple = ()

    def to_json_dict(self) -> dict:
        return {
            "ubar": self.ubar.tolist(),
            "blocks": [[t, s, blk.tolist()] for (t, s), blk in sorted(self.blocks.items())],
            "objective": self.objective,
        }


def concat_gains(blocks: Mblocks, N: int, m: int, p: int) -> np.ndarray:
    """The mN x pN strictly-lower block-triangular concatenation of the gains."""
    M = np.zeros((m * N, p * N))
    for (t, s), blk in blocks.items():
        if not 0 <= s < t <= N - 1:
            raise ValueError(f"gain block ({t},{s}) violates s < t <= N-1")
        M[t * m:(t + 1) * m, s * p:(s + 1) * p] = blk
    return M


def lambda_of(deltas: DeltaSet, blocks: Mblocks, i: int) -> np.ndarray:
    """Response of (u, y) at window offset i to the uncertainty vector."""
    if not 0 <= i < deltas.N:
        raise ValueError(f"offset {i} outside window of length {deltas.N}")
    M = concat_gains(blocks, deltas.N, deltas.m, deltas.p)
    top = deltas.du(i) @ M @ deltas.DM
    bottom = deltas.dy(i) @ M @ deltas.DM + deltas.da(i)
    return np.vstack([top, bottom])


def apply_policy(sol: PolicySolution, nu_history, t_offset: int) -> np.ndarray:
    """Evaluate u at window offset t_offset from the recorded innovations."""
    if len(nu_history) != t_offset:
        raise ValueError(
            f"policy at offset {t_offset} needs exactly {t_offset} innovations, "
            f"got {len(nu_history)}")
    u = sol.ubar[t_offset].copy()
    for s_off, nu in enumerate(nu_history):
        blk = sol.blocks.get((t_offset, s_off))
        if blk is not None:
            u += blk @ nu
    return u


def fixed_gain_blocks(model: StateSpaceModel, gains: EstimatorGains,
                      K: np.ndarray, N: int) -> Mblocks:
    """Gain blocks that reproduce u = ubar - K (xhat - xbar) exactly.

    Expanding the estimator recursion gives M[s -> t] = -K (A - BK)^{t-1-s} L.
    """
    K = np.asarray(K, dtype=float)
    AK = model.A - model.B @ K
    L = gains.Lgain
    blocks: Mblocks = {}
    power = np.eye(model.s_dim)
    for gap in range(1, N):  # gap = t - s
        coeff = -K @ power @ L
        for s_off in range(0, N - gap):
            blocks[(s_off + gap, s_off)] = coeff
        power = AK @ power
    return blocks


def lqr_gain(model: StateSpaceModel, Q: np.ndarray, R: np.ndarray,
             ridge: float = 1e-9) -> np.ndarray:
    """Infinite-horizon LQR gain for (A, B) with state cost C'QC + ridge*I."""
    Qs = numkit.symmetrize(model.C.T @ Q @ model.C) + ridge * np.eye(model.s_dim)
    sol = numkit.solve_dare(model.A.T, model.B.T, Qs, R, max_iter=100_000)
    return sol.gain.T


# ---------------------------------------------------------------------------
# cost / constraint specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostSpec:
    """Stage cost ||y - r||_Q^2 + ||u||_R^2 with a full-run reference."""

    Q: np.ndarray
    R: np.ndarray
    reference: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "Q", numkit.symmetrize(numkit.as_matrix(self.Q, "Q")))
        object.__setattr__(self, "R", numkit.symmetrize(numkit.as_matrix(self.R, "R")))
        if np.min(np.linalg.eigvalsh(self.R)) <= 0:
            raise ValueError("R must be positive definite")
        if np.min(np.linalg.eigvalsh(self.Q)) < -1e-12:
            raise ValueError("Q must be positive semi-definite")
        if self.reference is not None:
            object.__setattr__(self, "reference",
                               np.atleast_2d(np.asarray(self.reference, dtype=float)))

    def window(self, k: int, N: int) -> np.ndarray:
        """Reference slice r_{k..k+N-1}; held at the final value past the end."""
        p = self.Q.shape[0]
        if self.reference is None:
            return np.zeros((N, p))
        idx = np.clip(np.arange(k, k + N), 0, self.reference.shape[0] - 1)
        return self.reference[idx]


@dataclass(frozen=True)
class ConstraintSpec:
    """Rows e_i' [u; y] <= f_i enforced in the distributionally robust
    CVaR sense at level alpha (alpha = 1 degenerates to the nominal
    constraint)."""

    E: np.ndarray
    f: np.ndarray
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "E", numkit.as_matrix(self.E, "E"))
        object.__setattr__(self, "f", np.asarray(self.f, dtype=float).ravel())
        if self.E.shape[0] != self.f.size:
            raise ValueError("E and f row counts differ")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")

    @property
    def q(self) -> int:
        return self.f.size

    @property
    def tightening(self) -> float:
        """SOC coefficient 2 sqrt((1 - alpha)/alpha)."""
        return 2.0 * float(np.sqrt((1.0 - self.alpha) / self.alpha))


def sigma_eta_sqrt(model: StateSpaceModel, gains: EstimatorGains, N: int) -> np.ndarray:
    """Symmetric square root of Diag(Sx, I_N (x) Sw, I_N (x) Sv)."""
    s, p = model.s_dim, model.p
    out = np.zeros((s + s * N + p * N, s + s * N + p * N))
    sx = numkit.psd_sqrt(gains.Sx)
    sw = numkit.psd_sqrt(model.Sw)
    sv = numkit.psd_sqrt(model.Sv)
    out[:s, :s] = sx
    for i in range(N):
        lo = s + i * s
        out[lo:lo + s, lo:lo + s] = sw
    base = s + s * N
    for i in range(N):
        lo = base + i * p
        out[lo:lo + p, lo:lo + p] = sv
    return out


# ---------------------------------------------------------------------------
# cone compression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReducedConeData:
    """Per-(offset, row) compressed factors of the risk-cone norms.

    The norm ||Seta_sqrt Lambda_i' e_j|| depends on the gains only through
    zeta = (M' w)[:p*i], the innovation-coordinate image of the constraint
    direction; offset i therefore compresses from n_eta + 1 rows to at most
    p*i + 1.  ``factors[i]`` holds (F, basis) with F of p*i rows such that
    ||F zeta + g|| ** 2 + r  ==  full norm squared, with (g, r) per row in
    ``offsets`` / ``residual_sq``.
    """

    factors: list            # i -> (F: rows x p*i, basis: n_eta x rows)
    wvecs: np.ndarray        # q x N x mN constraint directions in input space
    offsets: np.ndarray      # N x q x pN (only first p*i entries used)
    residual_sq: np.ndarray  # N x q
    N: int
    m: int
    p: int

    def compressed_norm_sq(self, i: int, j: int, blocks: Mblocks) -> float:
        """||F zeta + g||^2 + r for the given gain blocks."""
        F, _ = self.factors[i]
        rows = F.shape[0]
        M = concat_gains(blocks, self.N, self.m, self.p)
        zeta = (M.T @ self.wvecs[j, i])[:rows]
        g = self.offsets[i, j, :rows]
        return float((F @ zeta + g) @ (F @ zeta + g) + self.residual_sq[i, j])


def reduce_soc_data(deltas: DeltaSet, Seta_sqrt: np.ndarray,
                    cons: ConstraintSpec) -> ReducedConeData:
    """Compress the cone norms via thin SVDs of the shared innovation factor."""
    N, m, p = deltas.N, deltas.m, deltas.p
    G = deltas.DM @ Seta_sqrt                      # pN x n_eta
    q = cons.q
    e_u = cons.E[:, :m]
    e_y = cons.E[:, m:]

    wvecs = np.zeros((q, N, m * N))
    for j in range(q):
        for i in range(N):
            wvecs[j, i] = deltas.du(i).T @ e_u[j] + deltas.dy(i).T @ e_y[j]

    factors = []
    offsets = np.zeros((N, q, p * N))
    residual_sq = np.zeros((N, q))
    for i in range(N):
        rows = p * i
        if rows:
            Gi = G[:rows]                          # rows x n_eta
            U, sv, Vt = np.linalg.svd(Gi.T, full_matrices=False)
            F = sv[:, None] * Vt                   # rows x rows
            basis = U                              # n_eta x rows
        else:
            F = np.zeros((0, 0))
            basis = np.zeros((G.shape[1], 0))
        factors.append((F, basis))
        for j in range(q):
            c_vec = Seta_sqrt @ (deltas.da(i).T @ e_y[j])
            g = basis.T @ c_vec
            r = float(c_vec @ c_vec - g @ g)
            if r < -1e-12 * max(1.0, float(c_vec @ c_vec)):
                raise numkit.RankError("negative compression residual")
            offsets[i, j, :rows] = g
            residual_sq[i, j] = max(r, 0.0)
    return ReducedConeData(factors=factors, wvecs=wvecs, offsets=offsets,
                           residual_sq=residual_sq, N=N, m=m, p=p)


def full_cone_norm(deltas: DeltaSet, Seta_sqrt: np.ndarray, cons: ConstraintSpec,
                   blocks: Mblocks, i: int, j: int) -> float:
    """Uncompressed ||Seta_sqrt Lambda_i' e_j||; oracle path for the tests."""
    lam = lambda_of(deltas, blocks, i)
    return float(np.linalg.norm(Seta_sqrt @ (lam.T @ cons.E[j])))


# ---------------------------------------------------------------------------
# program skeleton: everything except the state mean and reference window
# ---------------------------------------------------------------------------

@dataclass
class ControlProgram:
    """A cone program plus the decision layout needed to read the solution."""

    program: socp.ConicProgram
    N: int
    m: int
    p: int
    optimize_gains: bool
    fixed_blocks: Optional[Mblocks] = None

    def extract(self, x: np.ndarray, objective: float) -> PolicySolution:
        N, m, p = self.N, self.m, self.p
        ubar = x[:m * N].reshape(N, m).copy()
        blocks: Mblocks = {}
        if self.optimize_gains:
            offset = m * N
            for t in range(1, N):
                for s in range(t):
                    blocks[(t, s)] = x[offset:offset + m * p].reshape(m, p).copy()
                    offset += m * p
        elif self.fixed_blocks is not None:
            blocks = {key: blk.copy() for key, blk in self.fixed_blocks.items()}
        return PolicySolution(ubar=ubar, blocks=blocks, objective=objective)


class ProgramSkeleton:
    """Precomputed program pieces, reusable across control windows.

    The quadratic term, the constraint matrix and the cone layout never
    change within a run; only the linear term, offsets and the objective
    constant depend on (mu, reference window).
    """

    def __init__(self, model: StateSpaceModel, gains: EstimatorGains,
                 deltas: DeltaSet, reduced: Optional[ReducedConeData],
                 cost: CostSpec, cons: ConstraintSpec, N: int,
                 optimize_gains: bool = True,
                 fixed_blocks: Optional[Mblocks] = None,
                 deterministic: bool = False):
        if N != deltas.N:
            raise ValueError("horizon mismatch between deltas and skeleton")
        m, p, s = deltas.m, deltas.p, deltas.s_dim
        self.model, self.gains, self.deltas = model, gains, deltas
        self.cost, self.cons, self.N = cost, cons, N
        self.optimize_gains = optimize_gains and not deterministic
        self.deterministic = deterministic
        self.fixed_blocks = fixed_blocks
        G = deltas.DY                       # pN x mN nominal input response
        Theta = deltas.Theta                # pN x s
        Qbar = np.kron(np.eye(N), cost.Q)
        Rbar = np.kron(np.eye(N), cost.R)
        self.G, self.Theta, self.Qbar = G, Theta, Qbar
        self.GtQ = G.T @ Qbar

        n_M = m * p * N * (N - 1) // 2 if self.optimize_gains else 0
        self.n_M = n_M
        d = m * N + n_M
        self.dim = d

        # quadratic objective: nominal tracking plus (optionally) the
        # Frobenius uncertainty term in the gain entries
        P = np.zeros((d, d))
        P[:m * N, :m * N] = 2.0 * (self.GtQ @ G + Rbar)
        q_M = np.zeros(n_M)
        frob_const = 0.0
        if not deterministic:
            Seta = sigma_eta_sqrt(model, gains, N)
            self.Seta_sqrt = Seta
            Gc = deltas.DM @ Seta                       # pN x n_eta
            Hmat = Gc @ Gc.T                            # pN x pN
            Y = deltas.DA @ Seta                        # pN x n_eta
            Qs = numkit.psd_sqrt(cost.Q)
            for i in range(N):
                blk = Y[i * p:(i + 1) * p]
                frob_const += float(np.sum((Qs @ blk) ** 2))
            X = Y @ Gc.T                                # pN x pN  (DA S DM')
            Lmat = np.zeros((m * N, p * N))
            for i in range(N):
                Lmat += G[i * p:(i + 1) * p].T @ cost.Q @ X[i * p:(i + 1) * p]
            if self.optimize_gains:
                rowidx, colidx = [], []
                for t in range(1, N):
                    for s_off in range(t):
                        for a in range(m):
                            for b_ in range(p):
                                rowidx.append(t * m + a)
                                colidx.append(s_off * p + b_)
                rowidx = np.array(rowidx)
                colidx = np.array(colidx)
                Amat = Rbar + self.GtQ @ G
                P[m * N:, m * N:] = 2.0 * Hmat[np.ix_(colidx, colidx)] \
                    * Amat[np.ix_(rowidx, rowidx)]
                q_M = 2.0 * Lmat[rowidx, colidx]
                self._rowidx, self._colidx = rowidx, colidx
            else:
                fixedM = concat_gains(fixed_blocks or {}, N, m, p)
                Amat = Rbar + self.GtQ @ G
                frob_const += float(np.trace(Amat @ fixedM @ Hmat @ fixedM.T))
                frob_const += 2.0 * float(np.sum(Lmat * fixedM))
        else:
            self.Seta_sqrt = None
        self.P = P
        self.q_M = q_M
        self.frob_const = frob_const

        # constraint rows: per (offset i, constraint j) one cone
        e_u = cons.E[:, :m]
        e_y = cons.E[:, m:]
        coef = cons.tightening
        rows_A: list[np.ndarray] = []
        rows_Bmu: list[np.ndarray] = []
        rows_b: list[float] = []
        cones: list[socp.Cone] = []
        self._head_rows: list[int] = []   # row index of each cone's first entry
        row_count = 0
        for i in range(N):
            y_rows = slice(i * p, (i + 1) * p)
            for j in range(cons.q):
                a_u = np.zeros(d)
                a_u[i * m:(i + 1) * m] = e_u[j]
                a_u[:m * N] += G[y_rows].T @ e_y[j]
                bmu = Theta[y_rows].T @ e_y[j]
                if deterministic:
                    rows_A.append(a_u)
                    rows_Bmu.append(bmu)
                    rows_b.append(cons.f[j])
                    self._head_rows.append(row_count)
                    row_count += 1
                    continue
                if not self.optimize_gains:
                    norm_ij = np.sqrt(reduced.compressed_norm_sq(i, j, fixed_blocks or {}))
                    rows_A.append(a_u)
                    rows_Bmu.append(bmu)
                    rows_b.append(cons.f[j] - coef * norm_ij)
                    self._head_rows.append(row_count)
                    row_count += 1
                    continue
                F, _ = reduced.factors[i]
                n_rows = F.shape[0]
                self._head_rows.append(row_count)
                rows_A.append(a_u)
                rows_Bmu.append(bmu)
                rows_b.append(cons.f[j])
                row_count += 1
                if n_rows:
                    # zeta = (M' w)[:p*i] expressed in the free gain entries
                    zmap = np.zeros((n_rows, n_M), dtype=float)
                    cols = np.flatnonzero(self._rowidx // m <= i)
                    zmap[self._colidx[cols], cols] = reduced.wvecs[j, i][self._rowidx[cols]]
                    body = np.zeros((n_rows, d))
                    body[:, m * N:] = -coef * (F @ zmap)
                    rows_A.extend(body)
                    rows_Bmu.extend(np.zeros((n_rows, deltas.s_dim)))
                    rows_b.extend(coef * reduced.offsets[i, j, :n_rows])
                    row_count += n_rows
                rows_A.append(np.zeros(d))
                rows_Bmu.append(np.zeros(deltas.s_dim))
                rows_b.append(coef * np.sqrt(reduced.residual_sq[i, j]))
                row_count += 1
                cones.append(socp.soc(n_rows + 2))
        if deterministic or not self.optimize_gains:
            cones = [socp.nonneg(row_count)]
        self.A_cons = np.array(rows_A)
        self.Bmu = np.array(rows_Bmu)
        self.b_const = np.array(rows_b)
        self.cones = tuple(cones)
        # validate the structural pieces once so per-window programs can skip it
        probe = self.instantiate(np.zeros(deltas.s_dim), cost.window(0, N))
        probe.program.validate()

    def instantiate(self, mu: np.ndarray, r_window: np.ndarray) -> ControlProgram:
        """Fold the state mean and reference slice into a solvable program."""
        m, N = self.deltas.m, self.N
        mu = np.asarray(mu, dtype=float).ravel()
        r_vec = np.asarray(r_window, dtype=float).reshape(N * self.deltas.p)
        offset = self.Theta @ mu - r_vec
        q = np.concatenate([2.0 * (self.GtQ @ offset), self.q_M])
        const = float(offset @ self.Qbar @ offset) + self.frob_const
        b = self.b_const - self.Bmu @ mu
        prog = socp.ConicProgram(P=self.P, q=q, A=self.A_cons, b=b,
                                 cones=self.cones, constant=const)
        return ControlProgram(program=prog, N=N, m=m, p=self.deltas.p,
                              optimize_gains=self.optimize_gains,
                              fixed_blocks=self.fixed_blocks)


def assemble_program(model: StateSpaceModel, gains: EstimatorGains,
                     deltas: DeltaSet, reduced: Optional[ReducedConeData],
                     mu_k: np.ndarray, cost: CostSpec, cons: ConstraintSpec,
                     N: int, k: int = 0, **skeleton_kwargs) -> ControlProgram:
    """One-shot program assembly (skeleton + instantiation at mu_k)."""
    skel = ProgramSkeleton(model, gains, deltas, reduced, cost, cons, N,
                           **skeleton_kwargs)
    return skel.instantiate(mu_k, cost.window(k, N))


def _active_cones(program: socp.ConicProgram, s: np.ndarray,
                  tol: float = 1e-6) -> tuple:
    active = []
    offset = 0
    for idx, cone in enumerate(program.cones):
        blk = s[offset:offset + cone.dim]
        if cone.kind is socp.ConeKind.NONNEG:
            if np.min(blk) <= tol:
                active.append(idx)
        elif cone.kind is socp.ConeKind.SOC:
            if blk[0] - np.linalg.norm(blk[1:]) <= tol * max(1.0, abs(blk[0])):
                active.append(idx)
        offset += cone.dim
    return tuple(active)


def solve_policy(control: ControlProgram,
                 settings: Optional[socp.Settings] = None) -> Optional[PolicySolution]:
    """Solve one window program; None signals primal infeasibility."""
    sol = socp.solve(control.program, settings, validate=False)
    if sol.status is socp.SolveStatus.PRIMAL_INFEASIBLE:
        return None
    if sol.status is not socp.SolveStatus.OPTIMAL:
        raise socp.NumericalFailure(
            f"window program ended with status {sol.status.value} "
            f"(residuals {sol.residuals})")
    policy = control.extract(sol.x, sol.obj_val)
    policy.solver_iterations = sol.iterations
    policy.solver_status = sol.status.value
    policy.active_constraints = _active_cones(control.program, sol.s)
    return policy


# ---------------------------------------------------------------------------
# nominal rollout, estimator, expected cost
# ---------------------------------------------------------------------------

def nominal_rollout(model: StateSpaceModel, mu_k: np.ndarray,
                    ubar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free rollout from the state mean; returns (xbar[N+1], ybar[N])."""
    ubar = np.atleast_2d(np.asarray(ubar, dtype=float))
    N = ubar.shape[0]
    xbar = np.empty((N + 1, model.s_dim))
    ybar = np.empty((N, model.p))
    xbar[0] = np.asarray(mu_k, dtype=float).ravel()
    for t in range(N):
        ybar[t] = model.C @ xbar[t] + model.D @ ubar[t]
        xbar[t + 1] = model.A @ xbar[t] + model.B @ ubar[t]
    return xbar, ybar


@dataclass
class ControllerState:
    """Receding-horizon bookkeeping between and within windows."""

    k: int
    mu: np.ndarray
    mu_backup: np.ndarray
    xhat: Optional[np.ndarray] = None
    xbar: Optional[np.ndarray] = None
    nu_history: list = field(default_factory=list)


def estimator_update(model: StateSpaceModel, gains: EstimatorGains,
                     state: ControllerState, u_t: np.ndarray,
                     y_t: np.ndarray) -> ControllerState:
    """One observer step: append the innovation and advance the estimate."""
    nu = y_t - model.C @ state.xhat - model.D @ u_t
    state.nu_history.append(nu)
    state.xhat = model.A @ state.xhat + model.B @ u_t + gains.Lgain @ nu
    return state


def expected_cost(sol: PolicySolution, deltas: DeltaSet, Seta_sqrt: np.ndarray,
                  cost: CostSpec, mu_k: np.ndarray,
                  r_window: Optional[np.ndarray] = None) -> float:
    """Direct full-dimension evaluation of the window cost.

    Independent of the program assembly: builds every Lambda_i explicitly
    and sums the nominal stage costs plus the Frobenius uncertainty terms.
    """
    N, m, p = deltas.N, deltas.m, deltas.p
    mu_k = np.asarray(mu_k, dtype=float).ravel()
    r = np.zeros((N, p)) if r_window is None else np.asarray(r_window, dtype=float)
    ybar = (deltas.Theta @ mu_k + deltas.DY @ sol.ubar.reshape(-1)).reshape(N, p)
    S_half = np.zeros((m + p, m + p))
    S_half[:m, :m] = numkit.psd_sqrt(cost.R)
    S_half[m:, m:] = numkit.psd_sqrt(cost.Q)
    total = 0.0
    for i in range(N):
        err = ybar[i] - r[i]
        total += float(err @ cost.Q @ err + sol.ubar[i] @ cost.R @ sol.ubar[i])
        lam = lambda_of(deltas, sol.blocks, i)
        total += float(np.sum((S_half @ lam @ Seta_sqrt) ** 2))
    return total


# ---------------------------------------------------------------------------
# receding-horizon execution
# ---------------------------------------------------------------------------

def control_step(skeleton: ProgramSkeleton, state: ControllerState,
                 plant_io: Callable[[np.ndarray], np.ndarray],
                 N_c: int, settings: Optional[socp.Settings] = None
                 ) -> tuple[np.ndarray, ControllerState, dict]:
    """Solve one window and play the first N_c policies against the plant.

    On infeasibility the state mean falls back to the nominal backup and the
    program is re-solved once; a second failure raises InfeasibleAfterBackup.
    """
    model, gains, cost = skeleton.model, skeleton.gains, skeleton.cost
    N = skeleton.N
    r_window = cost.window(state.k, N)
    used_backup = False
    sol = solve_policy(skeleton.instantiate(state.mu, r_window), settings)
    if sol is None:
        used_backup = True
        state.mu = state.mu_backup.copy()
        sol = solve_policy(skeleton.instantiate(state.mu, r_window), settings)
        if sol is None:
            raise InfeasibleAfterBackup(
                f"window at k={state.k} infeasible from both the estimate "
                "and the backup mean")

    state.xhat = state.mu.copy()
    state.xbar = state.mu.copy()
    state.nu_history = []
    inputs = np.empty((N_c, model.m))
    for j in range(N_c):
        u = apply_policy(sol, state.nu_history, j)
        y = plant_io(u)
        estimator_update(model, gains, state, u, y)
        state.xbar = model.A @ state.xbar + model.B @ sol.ubar[j]
        inputs[j] = u

    diagnostics = {
        "k": state.k,
        "objective": sol.objective,
        "status": sol.solver_status,
        "solver_iterations": sol.solver_iterations,
        "active_constraints": list(sol.active_constraints),
        "used_backup": used_backup,
        "policy": sol.to_json_dict(),
    }
    next_state = ControllerState(
        k=state.k + N_c,
        mu=state.xhat.copy(),
        mu_backup=state.xbar.copy(),
    )
    return inputs, next_state, diagnostics


class RecedingHorizonController:
    """Window-by-window driver compatible with plant.simulate_closed_loop."""

    def __init__(self, skeleton: ProgramSkeleton, N_c: int, mu_ini: np.ndarray,
                 settings: Optional[socp.Settings] = None,
                 log_path=None):
        self.skeleton = skeleton
        self.N_c = N_c
        self.settings = settings
        self.state = ControllerState(
            k=0,
            mu=np.asarray(mu_ini, dtype=float).ravel().copy(),
            mu_backup=np.asarray(mu_ini, dtype=float).ravel().copy(),
        )
        self.log_path = log_path
        self.diagnostics: list[dict] = []

    def __call__(self, k: int, apply_input) -> int:
        if k != self.state.k:
            raise RuntimeError(f"controller clock {self.state.k} out of sync with plant {k}")
        _, self.state, diag = control_step(
            self.skeleton, self.state, apply_input, self.N_c, self.settings)
        self.diagnostics.append(diag)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(diag) + "\n")
        return self.N_c


# ---------------------------------------------------------------------------
# deterministic MPC baseline
# ---------------------------------------------------------------------------

class DeterministicInfeasible(RuntimeError):
    """Hard-constrained baseline program had no feasible point."""


def det_mpc_step(skeleton: ProgramSkeleton, xhat: np.ndarray, k: int,
                 settings: Optional[socp.Settings] = None) -> PolicySolution:
    """Solve the hard-constrained nominal program at the current estimate."""
    if not skeleton.deterministic:
        raise ValueError("det_mpc_step needs a deterministic skeleton")
    sol = solve_policy(skeleton.instantiate(xhat, skeleton.cost.window(k, skeleton.N)),
                       settings)
    if sol is None:
        raise DeterministicInfeasible(f"hard-constrained program infeasible at k={k}")
    return sol


class DeterministicMPCController:
    """Nominal MPC with hard constraints and a Luenberger/Kalman estimate."""

    def __init__(self, skeleton: ProgramSkeleton, N_c: int, mu_ini: np.ndarray,
                 settings: Optional[socp.Settings] = None):
        if not skeleton.deterministic:
            raise ValueError("need a deterministic skeleton")
        self.skeleton = skeleton
        self.N_c = N_c
        self.settings = settings
        self.xhat = np.asarray(mu_ini, dtype=float).ravel().copy()
        self.k = 0
        self.diagnostics: list[dict] = []

    def __call__(self, k: int, apply_input) -> int:
        sol = det_mpc_step(self.skeleton, self.xhat, k, self.settings)
        model, gains = self.skeleton.model, self.skeleton.gains
        state = ControllerState(k=k, mu=self.xhat, mu_backup=self.xhat,
                                xhat=self.xhat.copy())
        for j in range(self.N_c):
            u = sol.ubar[j]
            y = apply_input(u)
            estimator_update(model, gains, state, u, y)
        self.xhat = state.xhat
        self.k = k + self.N_c
        self.diagnostics.append({"k": k, "objective": sol.objective,
                                 "used_backup": False})
        return self.N_c
