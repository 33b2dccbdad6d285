import numpy as np
import pytest

from stochpc import plant
from stochpc.plant import (
    LTISystem, NoiseModel, RngStream, Trajectory,
    batch_reactor, collect_offline_data, sample_noise, simulate_closed_loop, step,
)

from conftest import random_system, rollout


def zero_controller(sys):
    def controller(k, apply_input):
        apply_input(np.zeros(sys.m))
        return 1
    return controller


# ---------------------------------------------------------------------------
# batch reactor matrices
# ---------------------------------------------------------------------------

def test_reactor_printed_entries():
    sys = batch_reactor()
    assert sys.A[0, 0] == 1.178
    assert sys.A[0, 3] == -0.403
    assert sys.B[1, 0] == 0.467
    assert np.array_equal(sys.C, [[1, 0, 1, -1], [0, 1, 0, 0]])
    assert np.array_equal(sys.D, np.zeros((2, 2)))
    assert (sys.n, sys.m, sys.p) == (4, 2, 2)


# ---------------------------------------------------------------------------
# step
# ---------------------------------------------------------------------------

def test_step_zero_everything():
    sys = batch_reactor()
    x_next, y = step(sys, np.zeros(4), np.zeros(2), np.zeros(4), np.zeros(2))
    assert np.array_equal(x_next, np.zeros(4))
    assert np.array_equal(y, np.zeros(2))


def test_step_unit_state_reads_first_output_column():
    sys = batch_reactor()
    _, y = step(sys, np.eye(4)[0], np.zeros(2), np.zeros(4), np.zeros(2))
    assert np.array_equal(y, [1.0, 0.0])


def test_step_matches_direct_recomputation(nprng):
    sys = random_system(nprng, 4, 2, 3)
    x = nprng.standard_normal(4)
    u = nprng.standard_normal(2)
    w = nprng.standard_normal(4)
    v = nprng.standard_normal(3)
    x_next, y = step(sys, x, u, w, v)
    assert np.max(np.abs(x_next - (sys.A @ x + sys.B @ u + w))) < 1e-14
    assert np.max(np.abs(y - (sys.C @ x + sys.D @ u + v))) < 1e-14


def test_step_dimension_mismatch():
    sys = batch_reactor()
    with pytest.raises(ValueError):
        step(sys, np.zeros(3), np.zeros(2), np.zeros(4), np.zeros(2))


# ---------------------------------------------------------------------------
# noise sampling
# ---------------------------------------------------------------------------

def test_noise_none_is_zero():
    model = NoiseModel(kind="none", Sw=np.eye(3), Sv=np.eye(2))
    w, v = sample_noise(model, RngStream(seed=5), 10)
    assert not w.any() and not v.any()
    assert w.shape == (10, 3) and v.shape == (10, 2)


def test_gaussian_noise_variance():
    model = NoiseModel(kind="gaussian", Sw=np.diag([4.0, 4.0]), Sv=np.eye(2))
    w, _ = sample_noise(model, RngStream(seed=7), 100_000)
    var = w.var(axis=0)
    assert np.all(np.abs(var - 4.0) < 0.2)


def test_gaussian_noise_cross_covariance(nprng):
    X = nprng.standard_normal((3, 3))
    Sw = X @ X.T + 0.5 * np.eye(3)
    model = NoiseModel(kind="gaussian", Sw=Sw, Sv=np.eye(2))
    w, _ = sample_noise(model, RngStream(seed=11), 200_000)
    emp = np.cov(w.T)
    assert np.max(np.abs(emp - Sw)) < 0.08 * np.max(np.abs(Sw))


def test_student_t_median_scale():
    # |t_2| has median sqrt(2/3) ~ 0.8165; variance is infinite, so use it.
    model = NoiseModel(kind="scaled_student_t", Sw=np.eye(1), Sv=np.eye(1),
                       dof=2, scale=1e-4)
    w, _ = sample_noise(model, RngStream(seed=3), 100_000)
    med = np.median(np.abs(w))
    assert abs(med - 0.8165e-4) < 0.2 * 0.8165e-4


def test_invalid_dof_rejected():
    with pytest.raises(ValueError):
        NoiseModel(kind="scaled_student_t", Sw=np.eye(1), Sv=np.eye(1), dof=0)


# ---------------------------------------------------------------------------
# offline data collection
# ---------------------------------------------------------------------------

def test_offline_data_zero_equilibrium():
    sys = batch_reactor()
    quiet = NoiseModel(kind="none", Sw=np.zeros((4, 4)), Sv=np.eye(2) * 1e-12)
    traj = collect_offline_data(sys, quiet, T_d=50, excitation_variance=0.0,
                                rng=RngStream(seed=1))
    assert np.max(np.abs(traj.u)) == 0.0
    assert np.max(np.abs(traj.y)) == 0.0


def test_offline_data_case_study_length():
    sys = batch_reactor()
    noise = NoiseModel(kind="scaled_student_t", Sw=np.eye(4), Sv=np.eye(2),
                       dof=2, scale=1e-4)
    traj = collect_offline_data(sys, noise, T_d=600, rng=RngStream(seed=2))
    assert len(traj) == 600
    assert np.all(np.isfinite(traj.u)) and np.all(np.isfinite(traj.y))


def test_offline_excitation_variance_convention():
    # with a noise-free plant started at rest, outputs stay 0 until the dither
    # feeds back, so the first input sample is pure dither of variance power/dt
    sys = batch_reactor()
    quiet = NoiseModel(kind="none", Sw=np.zeros((4, 4)), Sv=np.eye(2) * 1e-12)
    draws = np.array([
        collect_offline_data(sys, quiet, T_d=1, excitation_variance=1e-2,
                             dt=0.1, rng=RngStream(seed=s)).u[0]
        for s in range(4000)
    ])
    assert abs(draws.var() - 0.1) < 0.01


def test_offline_data_requires_strictly_proper_plant():
    sys = LTISystem(A=np.eye(2) * 0.5, B=np.eye(2), C=np.eye(2), D=np.eye(2))
    noise = NoiseModel(kind="none", Sw=np.zeros((2, 2)), Sv=np.eye(2))
    with pytest.raises(ValueError):
        collect_offline_data(sys, noise, T_d=10, rng=RngStream(seed=0))


# ---------------------------------------------------------------------------
# closed-loop simulation
# ---------------------------------------------------------------------------

def test_closed_loop_zero_everything():
    sys = batch_reactor()
    quiet = NoiseModel(kind="none", Sw=np.zeros((4, 4)), Sv=np.eye(2) * 1e-12)
    traj = simulate_closed_loop(sys, quiet, zero_controller(sys), 40, RngStream(seed=9))
    assert np.max(np.abs(traj.y)) == 0.0
    assert np.max(np.abs(traj.x)) == 0.0


def test_closed_loop_horizon_count():
    sys = batch_reactor()
    quiet = NoiseModel(kind="none", Sw=np.zeros((4, 4)), Sv=np.eye(2) * 1e-12)
    traj = simulate_closed_loop(sys, quiet, zero_controller(sys), 900, RngStream(seed=9))
    assert len(traj) == 900  # 90 s at dt = 0.1


def test_closed_loop_determinism():
    sys = batch_reactor()
    noise = NoiseModel(kind="gaussian", Sw=1e-4 * np.eye(4), Sv=1e-4 * np.eye(2))

    def wiggle(k, apply_input):
        apply_input(np.array([np.sin(0.1 * k), -0.2]))
        return 1

    a = simulate_closed_loop(sys, noise, wiggle, 60, RngStream(seed=123))
    b = simulate_closed_loop(sys, noise, wiggle, 60, RngStream(seed=123))
    assert np.array_equal(a.y, b.y) and np.array_equal(a.x, b.x)
    assert np.array_equal(a.w, b.w) and np.array_equal(a.v, b.v)


def test_closed_loop_log_consistency(nprng):
    sys = random_system(nprng, 3, 2, 2)
    noise = NoiseModel(kind="gaussian", Sw=0.01 * np.eye(3), Sv=0.01 * np.eye(2))

    def wiggle(k, apply_input):
        apply_input(np.array([np.cos(0.3 * k), 0.1]))
        return 1

    traj = simulate_closed_loop(sys, noise, wiggle, 50, RngStream(seed=77))
    # measurement equation holds exactly on every logged step
    resid = traj.y - traj.v - traj.x @ sys.C.T - traj.u @ sys.D.T
    assert np.max(np.abs(resid)) < 1e-13
    # state recursion holds exactly
    xs, _ = rollout(sys, traj.x[0], traj.u, traj.w, traj.v)
    assert np.max(np.abs(xs - traj.x)) < 1e-13
    # y_core removes the measurement noise
    assert np.max(np.abs(traj.y_core - (traj.y - traj.v))) == 0.0


def test_closed_loop_noise_free_dynamics_residual(nprng):
    sys = random_system(nprng, 3, 2, 2)
    quiet = NoiseModel(kind="none", Sw=np.zeros((3, 3)), Sv=np.eye(2) * 1e-9)

    def wiggle(k, apply_input):
        apply_input(np.array([1.0, -1.0]))
        return 1

    traj = simulate_closed_loop(sys, quiet, wiggle, 30, RngStream(seed=5))
    for t in range(29):
        resid = traj.x[t + 1] - sys.A @ traj.x[t] - sys.B @ traj.u[t]
        assert np.max(np.abs(resid)) < 1e-13


def test_preset_noise_replay(nprng):
    sys = batch_reactor()
    noise = NoiseModel(kind="gaussian", Sw=1e-6 * np.eye(4), Sv=1e-6 * np.eye(2))
    w = nprng.standard_normal((20, 4))
    v = nprng.standard_normal((20, 2))
    a = simulate_closed_loop(sys, noise, zero_controller(sys), 20,
                             RngStream(seed=1), preset_noise=(w, v))
    assert np.array_equal(a.w, w) and np.array_equal(a.v, v)


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------

def test_csv_round_trip(tmp_path, nprng):
    sys = random_system(nprng, 3, 2, 2)
    noise = NoiseModel(kind="gaussian", Sw=0.1 * np.eye(3), Sv=0.1 * np.eye(2))
    traj = simulate_closed_loop(sys, noise, zero_controller(sys), 25, RngStream(seed=8))
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    back = Trajectory.from_csv(path)
    for name in ("u", "y", "x", "w", "v"):
        assert np.array_equal(getattr(traj, name), getattr(back, name)), name
    with open(path) as fh:
        header = fh.readline().strip()
    assert header == "t,u1,u2,y1,y2,x1,x2,x3,w1,w2,w3,v1,v2"


def test_csv_io_only(tmp_path):
    traj = Trajectory(u=np.array([[1.0], [2.0]]), y=np.array([[3.0], [4.0]]))
    path = tmp_path / "io.csv"
    traj.to_csv(path)
    back = Trajectory.from_csv(path)
    assert np.array_equal(back.u, traj.u) and np.array_equal(back.y, traj.y)
    assert back.x is None and back.w is None


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

def test_rng_stream_reproducible():
    a = RngStream(seed=42, label="x").generator().standard_normal(5)
    b = RngStream(seed=42, label="x").generator().standard_normal(5)
    assert np.array_equal(a, b)


def test_rng_stream_labels_decorrelate():
    a = RngStream(seed=42, label="x").generator().standard_normal(5)
    b = RngStream(seed=42, label="y").generator().standard_normal(5)
    assert not np.array_equal(a, b)
