"""Stochastic LTI plant simulation and offline data capture.

The plant follows ``x[t+1] = A x[t] + B u[t] + w[t]``, ``y[t] = C x[t] +
D u[t] + v[t]``.  Noise can be switched off, Gaussian with configured
variances, or heavy-tailed (per-channel scaled Student-t).  Closed-loop runs
are driven by a controller callback and are bit-reproducible for a fixed
seed: every noise sample is materialized up front from a labelled RNG stream.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import numkit


@dataclass(frozen=True)
class LTISystem:
    """Discrete-time system matrices (A, B, C, D) with cached dimensions."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", numkit.as_matrix(self.A, "A"))
        object.__setattr__(self, "B", numkit.as_matrix(self.B, "B"))
        object.__setattr__(self, "C", numkit.as_matrix(self.C, "C"))
        object.__setattr__(self, "D", numkit.as_matrix(self.D, "D"))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise ValueError("B row count must match A")
        if self.C.shape[1] != n:
            raise ValueError("C column count must match A")
        if self.D.shape != (self.C.shape[0], self.B.shape[1]):
            raise ValueError("D must be p x m")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]


def batch_reactor() -> LTISystem:
    """Four-state, two-input, two-output reactor model sampled at 0.1 s."""
    A = np.array([
        [1.178, 0.001, 0.511, -0.403],
        [-0.051, 0.661, -0.011, 0.061],
        [0.076, 0.335, 0.560, 0.382],
        [0.0, 0.335, 0.089, 0.849],
    ])
    B = np.array([
        [0.004, -0.087],
        [0.467, 0.001],
        [0.213, -0.235],
        [0.213, -0.016],
    ])
    C = np.array([
        [1.0, 0.0, 1.0, -1.0],
        [0.0, 1.0, 0.0, 0.0],
    ])
    D = np.zeros((2, 2))
    return LTISystem(A=A, B=B, C=C, D=D)


def step(
    sys: LTISystem,
    x: np.ndarray,
    u: np.ndarray,
    w: np.ndarray,
    v: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One plant step: returns (x_next, y)."""
    x = np.asarray(x, dtype=float).reshape(sys.n)
    u = np.asarray(u, dtype=float).reshape(sys.m)
    w = np.asarray(w, dtype=float).reshape(sys.n)
    v = np.asarray(v, dtype=float).reshape(sys.p)
    x_next = sys.A @ x + sys.B @ u + w
    y = sys.C @ x + sys.D @ u + v
    return x_next, y


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

def _label_entropy(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class RngStream:
    """Labelled, reproducible random stream.

    Identical (seed, label) pairs reproduce identical draw sequences
    bit-for-bit.  Child streams append to the label so that independent
    noise sources never share a generator.
    """

    seed: int
    label: str = "stochpc"

    def child(self, label: str) -> "RngStream":
        return RngStream(seed=self.seed, label=f"{self.label}/{label}")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF,
                                     _label_entropy(self.label)])
        return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# Noise models
# ---------------------------------------------------------------------------

NOISE_KINDS = ("none", "gaussian", "scaled_student_t")


@dataclass(frozen=True)
class NoiseModel:
    """Process/measurement noise description.

    ``kind`` selects the sampler:
        none             all-zero sequences
        gaussian         draws shaped so Var[w] = Sw and Var[v] = Sv exactly
        scaled_student_t per-channel i.i.d. Student-t(dof) times ``scale``

    Sw/Sv always describe the *design* variances consumed by estimators; for
    the heavy-tailed kind the true second moment may not even exist.
    """

    kind: str
    Sw: np.ndarray
    Sv: np.ndarray
    dof: int = 2
    scale: float = 1e-4

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        object.__setattr__(self, "Sw", numkit.symmetrize(numkit.as_matrix(self.Sw, "Sw")))
        object.__setattr__(self, "Sv", numkit.symmetrize(numkit.as_matrix(self.Sv, "Sv")))
        if self.kind == "scaled_student_t" and self.dof <= 0:
            raise ValueError("Student-t dof must be positive")
        if np.any(np.linalg.eigvalsh(self.Sv) <= 0):
            raise ValueError("Sv must be positive definite")
        if np.any(np.linalg.eigvalsh(self.Sw) < -1e-12):
            raise ValueError("Sw must be positive semi-definite")


def _student_t(rng: np.random.Generator, dof: int, shape) -> np.ndarray:
    # Ratio construction from normal primitives: t = Z / sqrt(chi2_dof / dof),
    # with the chi-square realized as a sum of dof squared normals.
    z = rng.standard_normal(shape)
    chi2 = np.sum(rng.standard_normal((dof,) + tuple(shape)) ** 2, axis=0)
    return z / np.sqrt(chi2 / dof)


def sample_noise(
    model: NoiseModel,
    rng: RngStream,
    T: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw T process/measurement noise samples; returns (w, v) as (T, n), (T, p)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    n = model.Sw.shape[0]
    p = model.Sv.shape[0]
    if model.kind == "none":
        return np.zeros((T, n)), np.zeros((T, p))
    gw = rng.child("w").generator()
    gv = rng.child("v").generator()
    if model.kind == "gaussian":
        w = gw.standard_normal((T, n)) @ numkit.psd_sqrt(model.Sw).T
        v = gv.standard_normal((T, p)) @ numkit.psd_sqrt(model.Sv).T
        return w, v
    w = model.scale * _student_t(gw, model.dof, (T, n))
    v = model.scale * _student_t(gv, model.dof, (T, p))
    return w, v


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Logged input/output run, with state and noise when simulated.

    All present arrays share the same length along axis 0.  ``y_core`` is the
    measurement with the additive output noise removed (y - v), available only
    when v was logged.
    """

    u: np.ndarray
    y: np.ndarray
    x: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t0: int = 0

    def __post_init__(self):
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        T = self.u.shape[0]
        for name in ("y", "x", "w", "v"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.atleast_2d(np.asarray(arr, dtype=float))
            setattr(self, name, arr)
            if arr.shape[0] != T:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {T}")

    def __len__(self) -> int:
        return self.u.shape[0]

    @property
    def y_core(self) -> np.ndarray:
        if self.v is None:
            raise ValueError("noise-free output requires a logged v sequence")
        return self.y - self.v

    def to_csv(self, path) -> None:
        """Write `t,u*,y*[,x*,w*,v*]` rows at full double precision."""
        cols: list[tuple[str, np.ndarray]] = [("u", self.u), ("y", self.y)]
        for name in ("x", "w", "v"):
            arr = getattr(self, name)
            if arr is not None:
                cols.append((name, arr))
        header = ["t"]
        for name, arr in cols:
            header.extend(f"{name}{i + 1}" for i in range(arr.shape[1]))
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for t in range(len(self)):
                row = [str(self.t0 + t)]
                for _, arr in cols:
                    row.extend(format(val, ".17g") for val in arr[t])
                fh.write(",".join(row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            rows = [line.strip().split(",") for line in fh if line.strip()]
        if header[0] != "t":
            raise ValueError("first CSV column must be t")
        widths: dict[str, int] = {}
        for name in header[1:]:
            base = name.rstrip("0123456789")
            widths[base] = widths.get(base, 0) + 1
        data = np.array([[float(val) for val in row] for row in rows])
        t0 = int(data[0, 0]) if len(data) else 0
        out: dict[str, np.ndarray] = {}
        offset = 1
        for base, width in widths.items():
            out[base] = data[:, offset:offset + width]
            offset += width
        return cls(
            u=out["u"], y=out["y"],
            x=out.get("x"), w=out.get("w"), v=out.get("v"),
            t0=t0,
        )


# ---------------------------------------------------------------------------
# Closed-loop simulation
# ---------------------------------------------------------------------------

# A controller is invoked once per control window: controller(k, apply_input)
# must call apply_input(u) for each plant step it takes (receiving the
# measured y) and return the number of steps consumed (>= 1).
Controller = Callable[[int, Callable[[np.ndarray], np.ndarray]], int]


def simulate_closed_loop(
    sys: LTISystem,
    noise: NoiseModel,
    controller: Controller,
    T: int,
    rng: RngStream,
    x0: Optional[np.ndarray] = None,
    preset_noise: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> Trajectory:
    """Run a controller against the plant for T steps and log everything.

    Noise is materialized up front (or supplied via ``preset_noise`` so two
    controllers can face the identical realization), which makes runs
    deterministic given (seed, controller).
    """
    if preset_noise is not None:
        w_seq, v_seq = preset_noise
        w_seq = np.asarray(w_seq, dtype=float).reshape(T, sys.n)
        v_seq = np.asarray(v_seq, dtype=float).reshape(T, sys.p)
    else:
        w_seq, v_seq = sample_noise(noise, rng, T)

    x = np.zeros(sys.n) if x0 is None else np.asarray(x0, dtype=float).reshape(sys.n)
    xs = np.empty((T, sys.n))
    us = np.empty((T, sys.m))
    ys = np.empty((T, sys.p))
    t = 0

    def apply_input(u: np.ndarray) -> np.ndarray:
        nonlocal x, t
        if t >= T:
            raise RuntimeError("controller stepped past the simulation horizon")
        u = np.asarray(u, dtype=float).reshape(sys.m)
        xs[t] = x
        us[t] = u
        x_next, y = step(sys, x, u, w_seq[t], v_seq[t])
        ys[t] = y
        x = x_next
        t += 1
        return y

    while t < T:
        consumed = controller(t, apply_input)
        if consumed < 1:
            raise RuntimeError("controller consumed no plant steps")

    return Trajectory(u=us, y=ys, x=xs, w=w_seq, v=v_seq)


def collect_offline_data(
    sys: LTISystem,
    noise: NoiseModel,
    T_d: int,
    excitation_variance: float = 1e-2,
    dt: float = 0.1,
    rng: RngStream = RngStream(seed=0),
) -> Trajectory:
    """Record excitation data under the two-loop PI law plus white noise.

    The continuous-time law u1 = -(1/s) y2, u2 = (2 + 1/s) y1 is discretized
    with forward-Euler integrators at period ``dt``; the dither is i.i.d.
    Gaussian with per-sample variance ``excitation_variance / dt``
    (band-limited white-noise convention).  Requires a strictly proper plant
    (D = 0) so the current measurement can feed the current input.
    """
    if T_d < 1:
        raise ValueError("T_d must be >= 1")
    if sys.m != 2 or sys.p != 2:
        raise ValueError("the PI excitation law is wired for 2 inputs / 2 outputs")
    if np.any(sys.D != 0):
        raise ValueError("PI data collection requires D = 0")

    w_seq, v_seq = sample_noise(noise, rng.child("plant"), T_d)
    if excitation_variance > 0:
        std = float(np.sqrt(excitation_variance / dt))
        dither = std * rng.child("excitation").generator().standard_normal((T_d, sys.m))
    else:
        dither = np.zeros((T_d, sys.m))

    x = np.zeros(sys.n)
    integ = np.zeros(2)
    xs = np.empty((T_d, sys.n))
    us = np.empty((T_d, sys.m))
    ys = np.empty((T_d, sys.p))
    for t in range(T_d):
        y = sys.C @ x + v_seq[t]
        integ += dt * y
        u = np.array([-integ[1], 2.0 * y[0] + integ[0]]) + dither[t]
        xs[t] = x
        us[t] = u
        ys[t] = y
        x = sys.A @ x + sys.B @ u + w_seq[t]
    return Trajectory(u=us, y=ys, x=xs, w=w_seq, v=v_seq)
