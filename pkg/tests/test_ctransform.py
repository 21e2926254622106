import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asap import ctransform as ct
from asap.harness.cases import ActivationProfile, gen_case
from asap.harness.checks import check_marginals, check_stability
from asap.metrics import generalized_kl, kl_density_beta
from asap.sinkhorn import build_kernels


def _cost(seed, N, d_h=3, scale=2.0):
    c = gen_case(seed, N, d_h, 2, 0.0, ActivationProfile("isotropic", scale=scale))
    return build_kernels(c.Q, c.K).C


def test_flat_kernel_examples():
    C = np.zeros((2, 2))
    mu, nu = ct.uniform_marginals(2)
    g = ct.key_ctransform(np.zeros(2), C, nu, 1.0)
    np.testing.assert_allclose(g, -2 * math.log(2))
    P = ct.gibbs_plan(np.zeros(2), g, C, 1.0).P
    np.testing.assert_allclose(P, 0.25)
    np.testing.assert_allclose(P.sum(axis=0), 0.5)
    np.testing.assert_allclose(ct.source_ctransform(np.zeros(2), C, mu, 1.0), -2 * math.log(2))
    np.testing.assert_array_equal(ct.gibbs_plan(np.zeros(3), np.zeros(3), np.zeros((3, 3)), 1.0).P, np.ones((3, 3)))


def test_shift_clauses():
    C = _cost(1, 6)
    mu, nu = ct.uniform_marginals(6)
    rng = np.random.default_rng(0)
    f, g = rng.standard_normal(6), rng.standard_normal(6)
    np.testing.assert_allclose(ct.key_ctransform(f + 1.3, C, nu, 0.7), ct.key_ctransform(f, C, nu, 0.7) - 1.3, atol=1e-12)
    np.testing.assert_allclose(ct.source_ctransform(g + 1.3, C, mu, 0.7), ct.source_ctransform(g, C, mu, 0.7) - 1.3, atol=1e-12)
    np.testing.assert_allclose(ct.gibbs_plan(f + 2.0, g - 2.0, C, 0.7).P, ct.gibbs_plan(f, g, C, 0.7).P, rtol=1e-12)
    np.testing.assert_allclose(ct.key_normalized_plan(f + 5.0, C, nu, 0.7).P, ct.key_normalized_plan(f, C, nu, 0.7).P,
                               rtol=1e-12)


def test_zero_key_target_gives_zero_column():
    C = _cost(2, 5)
    nu = np.array([0.2, 0.2, 0.0, 0.2, 0.2])
    g = ct.key_ctransform(np.zeros(5), C, nu, 1.0)
    assert g[2] == -np.inf
    for mode in ct.MODES:
        P = ct.reconstruct(np.zeros(5), C, 1.0, "column", mode, nu > 0).P
        assert np.all(P[:, 2] == 0.0)


def test_transform_errors():
    C = np.zeros((3, 3))
    with pytest.raises(ValueError):
        ct.key_ctransform(np.zeros(3), C, np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        ct.source_ctransform(np.zeros(3), C, np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        ct.reconstruct(np.zeros(3), C, 1.0, mode="asap1")
    with pytest.raises(ValueError):
        ct.two_sided(np.zeros(3), C, *ct.uniform_marginals(3), 1.0, ending="diagonal")
    with pytest.raises(ValueError):
        ct.head_output(np.eye(3), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        ct.gibbs_plan(np.zeros(2), np.zeros(3), C, 1.0)


@given(st.integers(2, 30), st.integers(0, 2**31 - 1), st.sampled_from([0.5, 1.0, 2.0]))
@settings(max_examples=50, deadline=None)
def test_row_and_column_exactness(N, seed, eps):
    rng = np.random.default_rng(seed)
    C = _cost(seed, N)
    mu, nu = ct.uniform_marginals(N)
    g = rng.standard_normal(N) * 3
    f = ct.source_ctransform(g, C, mu, eps)
    np.testing.assert_allclose(ct.gibbs_plan(f, g, C, eps).P.sum(axis=1), mu, atol=1e-12)
    plan = ct.reconstruct(rng.standard_normal(N), C, eps, "column", "asap")
    np.testing.assert_allclose(plan.P.sum(axis=0), nu, atol=1e-12)
    row = ct.reconstruct(rng.standard_normal(N), C, eps, "row", "asap")
    np.testing.assert_allclose(row.P.sum(axis=1), mu, atol=1e-12)


def test_column_softmax_form_equals_literal_gibbs():
    rng = np.random.default_rng(3)
    for N in (1, 4, 17):
        C = _cost(N, N)
        _, nu = ct.uniform_marginals(N)
        f = rng.standard_normal(N)
        literal = ct.gibbs_plan(f, ct.key_ctransform(f, C, nu, 0.5), C, 0.5).P
        np.testing.assert_allclose(ct.key_normalized_plan(f, C, nu, 0.5).P, literal, rtol=1e-12, atol=1e-300)


def test_pass_counts():
    C = _cost(4, 8)
    f = np.zeros(8)
    for mode, ending, expected in (("asap0", "column", 1), ("asap", "column", 3), ("asap", "row", 2)):
        with ct.count_passes() as counter:
            ct.reconstruct(f, C, 1.0, ending, mode)
        assert sum(counter.values()) == expected
    with ct.count_passes() as outer:
        with ct.count_passes() as inner:
            ct.key_ctransform(f, C, np.full(8, 1 / 8), 1.0)
        assert sum(outer.values()) == 0 and inner["key"] == 1


def test_row_error_bound_example():
    rng = np.random.default_rng(5)
    for _ in range(20):
        N = int(rng.integers(2, 10))
        C = _cost(int(rng.integers(1000)), N)
        mu, nu = ct.uniform_marginals(N)
        f = rng.standard_normal(N) * 2
        d = ct.two_sided(f, C, mu, nu, 1.0)
        g0 = ct.key_ctransform(f, C, nu, 1.0)
        P = ct.gibbs_plan(d.f, d.g, C, 1.0).P
        assert np.abs(P.sum(axis=1) - mu).sum() <= np.expm1(np.max(np.abs(d.g - g0))) + 1e-14


def test_head_output_examples():
    V = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(ct.head_output(np.eye(3), V), V)
    np.testing.assert_array_equal(ct.head_output(np.eye(3), np.zeros((3, 2))), 0.0)
    plan = ct.TransportPlan(np.eye(3) / 3, *ct.uniform_marginals(3))
    np.testing.assert_allclose(ct.head_output(plan, V), V)


def test_identifiability_contrapositive():
    rng = np.random.default_rng(6)
    for _ in range(200):
        N = int(rng.integers(2, 7))
        C = _cost(int(rng.integers(10**6)), N)
        _, nu = ct.uniform_marginals(N)
        f = rng.standard_normal(N)
        f -= f.mean()
        f2 = f + rng.standard_normal(N) * 10.0 ** rng.uniform(-5, 0)
        f2 -= f2.mean()
        if np.max(np.abs(f2 - f)) <= 1e-6:
            continue
        P1 = ct.key_normalized_plan(f, C, nu, 1.0).P
        P2 = ct.key_normalized_plan(f2, C, nu, 1.0).P
        assert np.linalg.norm(P1 - P2) > 0


def test_kl_projection_characterization():
    rng = np.random.default_rng(7)
    for _ in range(10):
        N = int(rng.integers(2, 6))
        C = _cost(int(rng.integers(10**6)), N)
        _, nu = ct.uniform_marginals(N)
        f = rng.standard_normal(N)
        R = np.exp((f[:, None] - C))
        P = ct.key_normalized_plan(f, C, nu, 1.0).P
        base = generalized_kl(P, R)
        for _ in range(100):
            other = rng.random((N, N)) ** 3
            other *= nu / other.sum(axis=0)
            t = rng.uniform(1e-3, 1.0)
            Pp = (1 - t) * P + t * other
            np.testing.assert_allclose(Pp.sum(axis=0), nu, atol=1e-14)
            assert generalized_kl(Pp, R) > base


def test_kl_tilt_bound():
    rng = np.random.default_rng(8)
    for _ in range(60):
        N = int(rng.integers(2, 12))
        eps = float(rng.choice([0.5, 1.0, 2.0]))
        C = _cost(int(rng.integers(10**6)), N)
        _, nu = ct.uniform_marginals(N)
        f = rng.standard_normal(N)
        fh = f + rng.standard_normal(N) * rng.uniform(0.01, 1.0)
        P = ct.key_normalized_plan(f, C, nu, eps).P
        Ph = ct.key_normalized_plan(fh, C, nu, eps).P
        beta = kl_density_beta(P / nu, fh - f, eps)
        assert generalized_kl(Ph, P) <= beta / (2 * eps**2 * N) * np.sum((fh - f) ** 2) * (1 + 1e-9)


def test_marginal_check_small():
    res = check_marginals(cases=30)
    assert res.passed, res.detail


def test_stability_check_small():
    res = check_stability(cases=10)
    assert res.passed, res.detail
