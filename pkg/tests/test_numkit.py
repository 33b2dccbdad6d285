import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochpc import numkit
from stochpc.plant import batch_reactor


# ---------------------------------------------------------------------------
# block_hankel
# ---------------------------------------------------------------------------

def test_hankel_scalar_smallest_case():
    H = numkit.block_hankel(np.array([1.0, 2.0, 3.0, 4.0]), 2)
    assert np.array_equal(H, [[1, 2, 3], [2, 3, 4]])


def test_hankel_case_study_shape():
    sig = np.zeros((600, 2))
    assert numkit.block_hankel(sig, 10).shape == (20, 591)


def test_hankel_depth_one_is_identity():
    sig = np.arange(7.0)
    assert np.array_equal(numkit.block_hankel(sig, 1), sig[None, :])


def test_hankel_rejects_short_signal():
    with pytest.raises(ValueError):
        numkit.block_hankel(np.zeros(3), 4)


@settings(max_examples=30, deadline=None)
@given(T=st.integers(2, 12), d=st.integers(1, 3), K=st.integers(1, 6), seed=st.integers(0, 999))
def test_hankel_depths_agree_on_shared_rows(T, d, K, seed):
    if K + 1 > T:
        return
    sig = np.random.default_rng(seed).standard_normal((T, d))
    H_k = numkit.block_hankel(sig, K)
    H_k1 = numkit.block_hankel(sig, K + 1)
    cols = H_k1.shape[1]
    assert np.array_equal(H_k[:, :cols][:d * K], H_k1[:d * K])


# ---------------------------------------------------------------------------
# block_toeplitz
# ---------------------------------------------------------------------------

def test_toeplitz_scalar_case():
    T = numkit.block_toeplitz([[[1.0]], [[2.0]], [[3.0]]])
    assert np.array_equal(T, [[1, 0, 0], [2, 1, 0], [3, 2, 1]])


def test_toeplitz_single_block():
    M = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(numkit.block_toeplitz([M]), M)


def test_toeplitz_reactor_block_placement():
    sys = batch_reactor()
    blocks = [np.zeros((2, 4)), sys.C, sys.C @ sys.A]
    T = numkit.block_toeplitz(blocks)
    # block (3,1) holds the third coefficient C A
    assert np.allclose(T[4:6, 0:4], sys.C @ sys.A)
    assert np.allclose(T[0:2, 4:12], 0)


def test_toeplitz_rejects_mismatched_blocks():
    with pytest.raises(ValueError):
        numkit.block_toeplitz([np.zeros((2, 2)), np.zeros((3, 2))])


# ---------------------------------------------------------------------------
# pinv
# ---------------------------------------------------------------------------

def test_pinv_identity():
    assert np.allclose(numkit.pinv(np.eye(3)), np.eye(3))


def test_pinv_rank_one_diagonal():
    M = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert np.allclose(numkit.pinv(M), M)


def test_pinv_right_inverse_of_fat_full_row_rank(nprng):
    M = nprng.standard_normal((5, 8))
    assert np.max(np.abs(M @ numkit.pinv(M) - np.eye(5))) < 1e-10


@pytest.mark.parametrize("seed", range(6))
def test_pinv_moore_penrose_identities(seed):
    rng = np.random.default_rng(seed)
    rows = int(rng.integers(1, 51))
    cols = int(rng.integers(1, 51))
    M = rng.standard_normal((rows, cols))
    P = numkit.pinv(M)
    assert np.max(np.abs(M @ P @ M - M)) < 1e-9
    assert np.max(np.abs(P @ M @ P - P)) < 1e-9
    assert np.max(np.abs((M @ P).T - M @ P)) < 1e-9
    assert np.max(np.abs((P @ M).T - P @ M)) < 1e-9


# ---------------------------------------------------------------------------
# tikhonov_dagger
# ---------------------------------------------------------------------------

def test_tikhonov_scalar():
    assert np.allclose(numkit.tikhonov_dagger(np.array([[2.0]]), 0.0), [[0.5]])


def test_tikhonov_hand_computed_column():
    # W = [1; 1]: (W'W + 2)^{-1} W' = (1+1+2)^{-1} [1, 1]
    out = numkit.tikhonov_dagger(np.array([[1.0], [1.0]]), 2.0)
    assert np.allclose(out, [[0.25, 0.25]])


def test_tikhonov_limit_matches_pinv(nprng):
    W = nprng.standard_normal((12, 5))
    assert np.max(np.abs(numkit.tikhonov_dagger(W, 1e-12) - numkit.pinv(W))) < 1e-6


def test_tikhonov_small_lambda_left_inverse(nprng):
    W = nprng.standard_normal((9, 4))
    prod = numkit.tikhonov_dagger(W, 1e-12) @ W
    assert np.max(np.abs(prod - np.eye(4))) < 1e-6


def test_tikhonov_rank_failure_at_zero():
    W = np.ones((4, 2))  # column rank 1
    with pytest.raises(numkit.RankError):
        numkit.tikhonov_dagger(W, 0.0)


def test_tikhonov_rejects_negative_lambda():
    with pytest.raises(ValueError):
        numkit.tikhonov_dagger(np.eye(2), -1.0)


# ---------------------------------------------------------------------------
# solve_dare
# ---------------------------------------------------------------------------

def test_dare_zero_dynamics():
    sol = numkit.solve_dare(np.zeros((1, 1)), np.array([[3.0]]), np.eye(1), np.eye(1))
    assert np.allclose(sol.sigma, 1.0)
    assert np.allclose(sol.gain, 0.0)


def test_dare_scalar_matches_quadratic_formula():
    # fixed point of s = 0.25 s + 1 - 0.25 s^2/(s+1) collapses to s^2 = 0.25 s + 1
    expected = (0.25 + np.sqrt(0.25 ** 2 + 4.0)) / 2.0
    sol = numkit.solve_dare(np.array([[0.5]]), np.array([[1.0]]), np.eye(1), np.eye(1))
    assert abs(sol.sigma[0, 0] - expected) < 1e-9
    expected_gain = 0.5 * expected / (expected + 1.0)
    assert abs(sol.gain[0, 0] - expected_gain) < 1e-9


def test_dare_fixed_point_residual_random(nprng):
    for _ in range(5):
        n, p = 4, 2
        A = nprng.standard_normal((n, n))
        A *= 0.9 / max(abs(np.linalg.eigvals(A)))
        C = nprng.standard_normal((p, n))
        W = nprng.standard_normal((n, n))
        Sw = W @ W.T
        Sv = np.eye(p)
        sol = numkit.solve_dare(A, C, Sw, Sv)
        assert numkit.dare_residual(A, C, Sw, Sv, sol) < 1e-10
        assert np.min(np.linalg.eigvalsh(sol.sigma)) > -1e-10
        assert np.max(np.abs(sol.sigma - sol.sigma.T)) < 1e-12


def test_dare_divergence_detected():
    # unobservable unstable mode: iteration grows without bound
    with pytest.raises(numkit.DareDiverged):
        numkit.solve_dare(np.array([[2.0]]), np.array([[0.0]]),
                          np.eye(1), np.eye(1), max_iter=200)


# ---------------------------------------------------------------------------
# psd_sqrt
# ---------------------------------------------------------------------------

def test_psd_sqrt_identity():
    assert np.allclose(numkit.psd_sqrt(np.eye(4)), np.eye(4))


def test_psd_sqrt_diagonal():
    assert np.allclose(numkit.psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))


@pytest.mark.parametrize("seed", range(4))
def test_psd_sqrt_residual_random(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((6, 6))
    M = X @ X.T
    S = numkit.psd_sqrt(M)
    assert np.max(np.abs(S @ S - M)) < 1e-10
    assert np.max(np.abs(S - S.T)) == 0.0


def test_psd_sqrt_rejects_asymmetric():
    with pytest.raises(ValueError):
        numkit.psd_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))


# ---------------------------------------------------------------------------
# kron
# ---------------------------------------------------------------------------

def test_kron_constraint_direction_stack():
    E = numkit.kron(np.eye(2), np.array([[1.0], [-1.0]]))
    assert np.array_equal(E, [[1, 0], [-1, 0], [0, 1], [0, -1]])


def test_kron_with_scalar_identity(nprng):
    A = nprng.standard_normal((3, 4))
    assert np.array_equal(numkit.kron(A, np.array([[1.0]])), A)


def test_kron_dimension_rule():
    out = numkit.kron(np.eye(2), np.ones((2, 3)))
    assert out.shape == (4, 6)
