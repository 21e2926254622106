import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from asap.harness.checks import check_oracle_1d
from asap.metrics import ctransform_1d, oracle_ot_1d, sorted_matching_cost
from asap.numerics import SliceBank, center, sample_slice_bank
from asap.sinkhorn import ScoreCostPair, TeacherConfig, sinkhorn_run
from asap.sliced import feature_matrix, projections, slice_potential_1d


def test_potential_examples():
    np.testing.assert_allclose(slice_potential_1d([0.0, 1.0], [0.0, 1.0]), [0.0, 0.5])
    f = slice_potential_1d([0.0, 1.0], [0.0, 2.0])
    np.testing.assert_allclose(f, [0.0, 0.5])
    np.testing.assert_allclose(ctransform_1d(f, [0.0, 1.0], [0.0, 2.0]), [0.0, 0.0], atol=1e-15)
    # Brute force over both matchings agrees that the identity matching is optimal.
    assert oracle_ot_1d([0.0, 1.0], [0.0, 2.0]) == (1.0 - 0.5, (0, 1))


def test_tied_sources_get_equal_potentials():
    f = slice_potential_1d(np.full(5, 0.7), np.array([3.0, -1.0, 0.2, 8.0, 1.0]))
    assert np.all(f == f[0])


@given(st.integers(1, 7), st.integers(0, 2**31 - 1))
@settings(max_examples=60)
def test_potential_is_feasible_and_tight(N, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(N), rng.standard_normal(N)
    f = slice_potential_1d(a, b)
    h = ctransform_1d(f, a, b)
    cost = 0.5 * (a[:, None] - b[None, :]) ** 2
    assert np.max(f[:, None] + h[None, :] - cost) <= 1e-9
    ia, ib = np.argsort(a), np.argsort(b)
    np.testing.assert_allclose(f[ia] + h[ib], cost[ia, ib], atol=1e-9)


def test_oracle_check_passes():
    res = check_oracle_1d(cases=100)
    assert res.passed, res.detail


def _potential_loop(a, b):
    # Direct transcription of the sorted-support definition, one rank at a time.
    order = sorted(range(len(a)), key=lambda i: (a[i], i))
    A, B = [a[i] for i in order], sorted(b)
    f = np.empty(len(a))
    phi = 0.0
    for r, i in enumerate(order):
        if r > 0:
            phi += B[r - 1] * (A[r] - A[r - 1])
        f[i] = 0.5 * A[r] ** 2 - phi
    return f


def test_potential_matches_loop_definition():
    rng = np.random.default_rng(11)
    for N in (1, 2, 5, 13):
        a, b = rng.standard_normal(N), rng.standard_normal(N)
        np.testing.assert_allclose(slice_potential_1d(a, b), _potential_loop(a, b), atol=1e-13)


def test_features_for_equal_queries_and_keys():
    rng = np.random.default_rng(0)
    Q = rng.standard_normal((9, 3))
    bank = sample_slice_bank(4, 6, 3)
    X = feature_matrix(Q, Q, bank)
    a, _ = projections(Q, Q, bank)
    for l in range(bank.L):
        np.testing.assert_allclose(X[:, l], center(_potential_loop(a[:, l], a[:, l])), atol=1e-12)
        # Matched pairs are identical points: the dual pair is tight at zero cost.
        h = ctransform_1d(X[:, l], a[:, l], a[:, l])
        np.testing.assert_allclose(X[:, l] + h, 0.0, atol=1e-12)


def test_features_hand_example():
    bank = SliceBank(np.array([[1.0]]), 0)
    X = feature_matrix(np.array([[0.0], [1.0]]), np.array([[0.0], [2.0]]), bank)
    np.testing.assert_allclose(X[:, 0], [-0.25, 0.25])


def test_features_centered_and_permutation_equivariant():
    rng = np.random.default_rng(1)
    Q, K = rng.standard_normal((20, 5)), rng.standard_normal((20, 5))
    bank = sample_slice_bank(2, 8, 5)
    X = feature_matrix(Q, K, bank)
    np.testing.assert_allclose(X.mean(axis=0), 0.0, atol=1e-12)
    pi = rng.permutation(20)
    np.testing.assert_allclose(feature_matrix(Q[pi], K[pi], bank), X[pi], atol=1e-12)


def test_features_permutation_equivariant_with_ties():
    rng = np.random.default_rng(2)
    Q = np.round(rng.standard_normal((12, 1)))
    K = np.round(rng.standard_normal((12, 1)))
    bank = SliceBank(np.array([[1.0], [-1.0]]), 0)
    X = feature_matrix(Q, K, bank)
    pi = rng.permutation(12)
    np.testing.assert_allclose(feature_matrix(Q[pi], K[pi], bank), X[pi], atol=1e-12)


def test_slice_order_only_permutes_columns():
    rng = np.random.default_rng(3)
    Q, K = rng.standard_normal((15, 4)), rng.standard_normal((15, 4))
    bank = sample_slice_bank(5, 7, 4)
    order = rng.permutation(7)
    perm_bank = SliceBank(bank.directions[order], bank.seed)
    np.testing.assert_array_equal(feature_matrix(Q, K, perm_bank), feature_matrix(Q, K, bank)[:, order])


def test_masked_features_use_active_keys_only():
    rng = np.random.default_rng(4)
    Q, K = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
    active = np.arange(8) < 6
    bank = sample_slice_bank(0, 4, 3)
    X = feature_matrix(Q, K, bank, active)
    K2 = K.copy()
    K2[~active] = 1e3
    np.testing.assert_array_equal(feature_matrix(Q, K2, bank, active), X)
    np.testing.assert_allclose(X.mean(axis=0), 0.0, atol=1e-12)


def test_feature_errors():
    with pytest.raises(ValueError):
        feature_matrix(np.zeros((3, 2)), np.zeros((3, 3)), sample_slice_bank(0, 2, 2))
    with pytest.raises(ValueError):
        feature_matrix(np.zeros((3, 2)), np.zeros((3, 2)), sample_slice_bank(0, 2, 2), np.zeros(3, bool))


def _embedded_1d(seed, N=16, d_h=4, eps=0.01, S=2000):
    # A 1-D problem embedded along one direction; projections recover a and b.
    rng = np.random.default_rng(seed)
    theta = np.zeros(d_h)
    theta[0] = 1.0
    a, b = rng.standard_normal(N), rng.standard_normal(N)
    Q, K = np.outer(a, theta) * d_h**0.25, np.outer(b, theta) * d_h**0.25
    bank = SliceBank(theta[None, :], 0)
    pa, pb = projections(Q, K, bank)
    np.testing.assert_allclose(pa[:, 0], a, atol=1e-12)
    np.testing.assert_allclose(pb[:, 0], b, atol=1e-12)
    C = 0.5 * (a[:, None] - b[None, :]) ** 2
    z = np.zeros(N)
    trace = sinkhorn_run(Q, K, TeacherConfig(eps, S, "quadratic_cost"), kernels=ScoreCostPair(-C, C, z, z))
    return a, b, trace.closure_ready_f, feature_matrix(Q, K, bank)[:, 0]


@pytest.mark.parametrize("eps", [0.01, 0.1, 0.5])
def test_sliced_and_entropic_duals_share_units(eps):
    # Both are near-optimal Kantorovich potentials of the same 1-D problem:
    # the sliced one closes the duality gap exactly, the entropic one within eps log N.
    for seed in range(8):
        a, b, f_ent, f_sl = _embedded_1d(seed, eps=eps)
        N = a.size
        W0 = sorted_matching_cost(a, b) / N
        gap_sl = W0 - np.mean(f_sl) - np.mean(ctransform_1d(f_sl, a, b))
        gap_ent = W0 - np.mean(f_ent) - np.mean(ctransform_1d(f_ent, a, b))
        assert abs(gap_sl) <= 1e-12
        assert -1e-12 <= gap_ent <= eps * np.log(N)


@pytest.mark.xfail(strict=True, reason="1-D potentials are not unique: the sliced formula takes the lower "
                   "slope on each gap while the small-eps entropic dual sits inside the interval, so ranks "
                   "can differ on closely spaced supports")
def test_sliced_potential_rank_correlation_with_small_eps_dual():
    rhos = [spearmanr(center(f_ent), f_sl).statistic for f_ent, f_sl in
            (_embedded_1d(seed)[2:] for seed in range(10))]
    assert min(rhos) >= 0.99
