"""From recorded input/output data to a control-ready state-space surrogate.

The pipeline is: partition the offline data into shifted Hankel blocks,
recover the one-step output predictor by (possibly regularized) least
squares, then assemble an auxiliary state-space model whose state stacks the
last L inputs, the last L noise-free outputs, and the last L process-noise
response windows.  The auxiliary model reproduces the plant's input/output
behavior exactly and is parameterized by data alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numkit
from .plant import LTISystem


@dataclass(frozen=True)
class HankelPartition:
    """Offline data split into past blocks (U1, Y1) and one-step rows (U2, Y2).

    col(U1, U2) is the (L+1)-depth block Hankel matrix of the input data and
    likewise for the outputs; all four share width h = T_d - L.
    """

    U1: np.ndarray
    U2: np.ndarray
    Y1: np.ndarray
    Y2: np.ndarray
    L: int

    @property
    def h(self) -> int:
        return self.U1.shape[1]

    @property
    def m(self) -> int:
        return self.U2.shape[0]

    @property
    def p(self) -> int:
        return self.Y2.shape[0]


@dataclass(frozen=True)
class PredictorMatrices:
    """One-step output predictor blocks (GammaU, GammaY, D)."""

    GammaU: np.ndarray
    GammaY: np.ndarray
    Dmat: np.ndarray

    @property
    def p(self) -> int:
        return self.GammaU.shape[0]

    @property
    def m(self) -> int:
        return self.Dmat.shape[1]

    @property
    def L(self) -> int:
        return self.GammaY.shape[1] // self.p

    def to_json_dict(self) -> dict:
        return {
            "GammaU": self.GammaU.tolist(),
            "GammaY": self.GammaY.tolist(),
            "D": self.Dmat.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PredictorMatrices":
        return cls(
            GammaU=np.asarray(doc["GammaU"], dtype=float),
            GammaY=np.asarray(doc["GammaY"], dtype=float),
            Dmat=np.asarray(doc["D"], dtype=float),
        )


@dataclass(frozen=True)
class ModelStructuralMatrices:
    """Extended observability, controllability and impulse-response matrices."""

    Obs: np.ndarray   # col(C, CA, ..., C A^{L-1}),  pL x n
    Ctrb: np.ndarray  # [A^{L-1} B, ..., A B, B],     n x mL
    Imp: np.ndarray   # Toep(D, CB, ..., C A^{L-2} B), pL x mL


@dataclass(frozen=True)
class AuxModel:
    """Data-representable state-space realization of the plant.

    The state dimension is n_aux = mL + pL + pL^2; A_aux/B_aux carry a fixed
    shift/zero pattern with the output map embedded in the middle block row,
    and the process-noise variance is nonzero only on the trailing pL block.
    """

    A_aux: np.ndarray
    B_aux: np.ndarray
    C_aux: np.ndarray
    Dmat: np.ndarray
    Sw_aux: np.ndarray
    Sv: np.ndarray
    L: int

    @property
    def n_aux(self) -> int:
        return self.A_aux.shape[0]

    @property
    def m(self) -> int:
        return self.B_aux.shape[1]

    @property
    def p(self) -> int:
        return self.C_aux.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "L": self.L,
            "A": self.A_aux.tolist(),
            "B": self.B_aux.tolist(),
            "C": self.C_aux.tolist(),
            "D": self.Dmat.tolist(),
            "Sw": self.Sw_aux.tolist(),
            "Sv": self.Sv.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "AuxModel":
        return cls(
            A_aux=np.asarray(doc["A"], dtype=float),
            B_aux=np.asarray(doc["B"], dtype=float),
            C_aux=np.asarray(doc["C"], dtype=float),
            Dmat=np.asarray(doc["D"], dtype=float),
            Sw_aux=np.asarray(doc["Sw"], dtype=float),
            Sv=np.asarray(doc["Sv"], dtype=float),
            L=int(doc["L"]),
        )


def save_pipeline(path, predictor: PredictorMatrices, aux: AuxModel) -> None:
    """Persist identification results so control can run in a later process."""
    doc = {"predictor": predictor.to_json_dict(), "aux_model": aux.to_json_dict()}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_pipeline(path) -> tuple[PredictorMatrices, AuxModel]:
    with open(path) as fh:
        doc = json.load(fh)
    return (PredictorMatrices.from_json_dict(doc["predictor"]),
            AuxModel.from_json_dict(doc["aux_model"]))


# ---------------------------------------------------------------------------
# Data partitioning and excitation checks
# ---------------------------------------------------------------------------

def partition_data(u_d: np.ndarray, y_d: np.ndarray, L: int) -> HankelPartition:
    """Split (L+1)-depth Hankel matrices of the data into past/last blocks."""
    u_d = np.atleast_2d(np.asarray(u_d, dtype=float))
    y_d = np.atleast_2d(np.asarray(y_d, dtype=float))
    if u_d.shape[0] == 1 and u_d.shape[1] > 1:
        u_d = u_d.T
    if y_d.shape[0] == 1 and y_d.shape[1] > 1:
        y_d = y_d.T
    T_d = u_d.shape[0]
    if y_d.shape[0] != T_d:
        raise ValueError("input and output data must share length")
    if T_d <= L:
        raise ValueError(f"need T_d > L, got T_d={T_d}, L={L}")
    m = u_d.shape[1]
    p = y_d.shape[1]
    Hu = numkit.block_hankel(u_d, L + 1)
    Hy = numkit.block_hankel(y_d, L + 1)
    return HankelPartition(
        U1=Hu[:m * L], U2=Hu[m * L:],
        Y1=Hy[:p * L], Y2=Hy[p * L:],
        L=L,
    )


def check_persistent_excitation(
    u_d: np.ndarray,
    order: int,
    tol: float = 1e-8,
) -> tuple[bool, float]:
    """Relative-rank test of the depth-`order` Hankel matrix of the input.

    Returns (ok, margin) where margin is the smallest-to-largest singular
    value ratio; ok requires margin > tol.
    """
    H = numkit.block_hankel(u_d, order)
    s = np.linalg.svd(H, compute_uv=False)
    if H.shape[0] > H.shape[1]:
        return False, 0.0  # fewer columns than rows: full row rank impossible
    margin = float(s[-1] / s[0]) if s[0] > 0 else 0.0
    return margin > tol, margin


# ---------------------------------------------------------------------------
# Predictor recovery
# ---------------------------------------------------------------------------

def estimate_predictor(part: HankelPartition, lam: float = 0.0) -> PredictorMatrices:
    """Recover (GammaU, GammaY, D) from the data partition.

    With ``lam == 0`` the recovery is Y2 pinv(col(U1, Y1, U2)), exact for
    noise-free persistently exciting data; ``lam > 0`` swaps in the Tikhonov
    inverse (W'W + lam I)^{-1} W' to tame noisy data.
    """
    W = np.vstack([part.U1, part.Y1, part.U2])
    if lam == 0.0:
        G = part.Y2 @ numkit.pinv(W)
    else:
        # tikhonov_dagger(W, lam) is (W'W + lam I)^{-1} W' of shape h x (mL+pL+m)
        G = part.Y2 @ numkit.tikhonov_dagger(W, lam)
    m, p, L = part.m, part.p, part.L
    return PredictorMatrices(
        GammaU=G[:, :m * L],
        GammaY=G[:, m * L:m * L + p * L],
        Dmat=G[:, m * L + p * L:],
    )


def structural_matrices(sys: LTISystem, L: int) -> ModelStructuralMatrices:
    """Extended observability/controllability and impulse-response matrices."""
    obs_blocks = []
    Ak = np.eye(sys.n)
    for _ in range(L):
        obs_blocks.append(sys.C @ Ak)
        Ak = Ak @ sys.A
    Obs = np.vstack(obs_blocks)

    ctrb_blocks = []
    Ak = np.eye(sys.n)
    for _ in range(L):
        ctrb_blocks.insert(0, Ak @ sys.B)
        Ak = Ak @ sys.A
    Ctrb = np.hstack(ctrb_blocks)

    imp_blocks = [sys.D]
    Ak = np.eye(sys.n)
    for _ in range(L - 1):
        imp_blocks.append(sys.C @ Ak @ sys.B)
        Ak = Ak @ sys.A
    Imp = numkit.block_toeplitz(imp_blocks)
    return ModelStructuralMatrices(Obs=Obs, Ctrb=Ctrb, Imp=Imp)


def model_predictor(
    sys: LTISystem,
    L: int,
    rank_tol: float = 1e-10,
) -> tuple[PredictorMatrices, ModelStructuralMatrices]:
    """Predictor blocks computed from known system matrices.

    Serves as the exactness oracle for :func:`estimate_predictor`.  Requires
    the depth-L observability matrix to have full column rank.
    """
    sm = structural_matrices(sys, L)
    sv = np.linalg.svd(sm.Obs, compute_uv=False)
    if sv[-1] <= rank_tol * sv[0]:
        raise ValueError(
            f"observability matrix rank deficient at L={L}; increase L"
        )
    n, m, p = sys.n, sys.m, sys.p
    AL = np.linalg.matrix_power(sys.A, L)
    lhs = np.hstack([sys.C @ sm.Ctrb, sys.C @ AL])          # p x (mL + n)
    Z = np.zeros((m * L + p * L, m * L + n))
    Z[:m * L, :m * L] = np.eye(m * L)
    Z[m * L:, :m * L] = sm.Imp
    Z[m * L:, m * L:] = sm.Obs
    G = lhs @ numkit.pinv(Z, rank_tol)
    return (
        PredictorMatrices(GammaU=G[:, :m * L], GammaY=G[:, m * L:], Dmat=sys.D.copy()),
        sm,
    )


# ---------------------------------------------------------------------------
# Auxiliary model assembly
# ---------------------------------------------------------------------------

def _shift_up(q: int, L: int) -> np.ndarray:
    """qL x qL block upshift: col(z_1..z_L) -> col(z_2..z_L, 0)."""
    S = np.zeros((q * L, q * L))
    if L > 1:
        S[:q * (L - 1), q:] = np.eye(q * (L - 1))
    return S


def _selector(j: int, p: int, L: int) -> np.ndarray:
    """S_j = [0, I_p, 0]: picks block j (1-based) out of a pL stack."""
    S = np.zeros((p, p * L))
    S[:, (j - 1) * p:j * p] = np.eye(p)
    return S


def build_aux_model(
    pred: PredictorMatrices,
    L: int,
    Srho: np.ndarray,
    Sv: np.ndarray,
) -> AuxModel:
    """Assemble the auxiliary state-space model from predictor blocks.

    The state stacks (u history, noise-free y history, noise-response
    history); the transition matrix combines three block upshifts with the
    output map written into the last rows of the middle block.
    """
    m, p = pred.m, pred.p
    if pred.L != L:
        raise ValueError(f"predictor was built for L={pred.L}, not {L}")
    Srho = numkit.symmetrize(numkit.as_matrix(Srho, "Srho"))
    Sv = numkit.symmetrize(numkit.as_matrix(Sv, "Sv"))
    if Srho.shape != (p * L, p * L):
        raise ValueError(f"Srho must be {p * L} x {p * L}")
    if Sv.shape != (p, p):
        raise ValueError(f"Sv must be {p} x {p}")
    n_aux = m * L + p * L + p * L * L

    # E folds noise-response history into the recorded outputs; F extracts
    # the current-step contribution.
    E = numkit.block_toeplitz(
        [np.zeros((p, p * L))] + [_selector(j, p, L) for j in range(1, L)]
    )
    F = np.hstack([_selector(j, p, L) for j in range(L, 0, -1)])
    C_aux = np.hstack([pred.GammaU, pred.GammaY, F - pred.GammaY @ E])

    A_aux = np.zeros((n_aux, n_aux))
    A_aux[:m * L, :m * L] = _shift_up(m, L)
    A_aux[m * L:m * L + p * L, m * L:m * L + p * L] = _shift_up(p, L)
    A_aux[m * L + p * L:, m * L + p * L:] = _shift_up(p * L, L)
    A_aux[m * L + p * (L - 1):m * L + p * L, :] += C_aux

    B_aux = np.zeros((n_aux, m))
    B_aux[m * (L - 1):m * L, :] = np.eye(m)
    B_aux[m * L + p * (L - 1):m * L + p * L, :] = pred.Dmat

    Sw_aux = np.zeros((n_aux, n_aux))
    Sw_aux[n_aux - p * L:, n_aux - p * L:] = Srho

    return AuxModel(
        A_aux=A_aux, B_aux=B_aux, C_aux=C_aux, Dmat=pred.Dmat.copy(),
        Sw_aux=Sw_aux, Sv=Sv, L=L,
    )


def aux_state_from_history(
    u_hist: np.ndarray,
    ycore_hist: np.ndarray,
    rho_hist: np.ndarray,
) -> np.ndarray:
    """Stack (u, noise-free y, noise response) histories into an aux state.

    Each history must hold exactly L entries ordered oldest first; rho
    entries are pL-vectors.
    """
    u_hist = np.atleast_2d(np.asarray(u_hist, dtype=float))
    ycore_hist = np.atleast_2d(np.asarray(ycore_hist, dtype=float))
    rho_hist = np.atleast_2d(np.asarray(rho_hist, dtype=float))
    if not (u_hist.shape[0] == ycore_hist.shape[0] == rho_hist.shape[0]):
        raise ValueError("histories must share length L")
    return np.concatenate([u_hist.ravel(), ycore_hist.ravel(), rho_hist.ravel()])


def aux_disturbance(rho_t: np.ndarray, n_aux: int) -> np.ndarray:
    """Auxiliary disturbance: zeros with rho_t in the trailing pL slots."""
    rho_t = np.asarray(rho_t, dtype=float).ravel()
    out = np.zeros(n_aux)
    out[n_aux - rho_t.size:] = rho_t
    return out
