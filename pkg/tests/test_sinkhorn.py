import math

import numpy as np
import pytest

from asap import ctransform as ct
from asap.harness.cases import ActivationProfile, gen_case
from asap.harness.checks import shift_gap
from asap.numerics import center
from asap.sinkhorn import (
    ScoreCostPair,
    TeacherConfig,
    build_kernels,
    matrix_scaling,
    normalizer_forward,
    sinkhorn_run,
    teacher_reference,
)


def _case(seed, N, d_h=4, mask=0.0, scale=1.5):
    return gen_case(seed, N, d_h, 3, mask, ActivationProfile("isotropic", scale=scale))


def _cost_pair(C):
    z = np.zeros(C.shape[0])
    return ScoreCostPair(-C, C, z, z)


def _run_cost(C, eps, S, active=None):
    N = C.shape[0]
    return sinkhorn_run(np.zeros((N, 1)), np.zeros((N, 1)), TeacherConfig(eps, S, "quadratic_cost"), active, _cost_pair(C))


def test_teacher_config_validation_and_ending():
    assert TeacherConfig(budget=20).ending == "column"
    assert TeacherConfig(budget=3).ending == "row"
    for bad in ({"epsilon": 0.0}, {"budget": 0}, {"budget": 2.5}, {"kernel": "dot"}):
        with pytest.raises(ValueError):
            TeacherConfig(**bad)
    cfg = TeacherConfig(0.5, 7, "quadratic_cost")
    assert TeacherConfig.from_dict(cfg.to_dict()) == cfg


def test_build_kernels_examples():
    q = np.array([[1.0, 2.0]])
    pair = build_kernels(q, q)
    assert pair.C[0, 0] == 0.0
    assert pair.S[0, 0] == pytest.approx(5.0 / math.sqrt(2))
    pair = build_kernels(np.array([[0.0], [1.0]]), np.array([[0.0], [2.0]]))
    np.testing.assert_allclose(pair.C, [[0.0, 2.0], [0.5, 0.5]], atol=1e-15)


def test_build_kernels_identity_and_distance_oracle():
    rng = np.random.default_rng(1)
    for N in range(1, 9):
        Q, K = rng.standard_normal((N, 5)), rng.standard_normal((N, 5))
        pair = build_kernels(Q, K)
        np.testing.assert_allclose(-pair.C + pair.rho[:, None] + pair.kappa[None, :], pair.S, atol=1e-10)
        dist = np.array([[np.sum((q - k) ** 2) for k in K] for q in Q]) / (2 * math.sqrt(5))
        np.testing.assert_allclose(pair.C, dist, atol=1e-12)


def test_build_kernels_dimension_mismatch():
    with pytest.raises(ValueError):
        build_kernels(np.zeros((3, 2)), np.zeros((3, 4)))


def test_single_step_is_row_softmax():
    c = _case(3, 7)
    trace = sinkhorn_run(c.Q, c.K, TeacherConfig(1.0, 1, "score"))
    s = build_kernels(c.Q, c.K).S
    soft = np.exp(s - s.max(axis=1, keepdims=True))
    soft /= soft.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(trace.final_plan.A, soft, atol=1e-14)
    zero = sinkhorn_run(np.zeros((2, 3)), np.zeros((2, 3)), TeacherConfig(1.0, 1))
    np.testing.assert_allclose(zero.final_plan.A, 0.5, atol=1e-15)


def test_two_step_hand_example():
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    A = _run_cost(C, 1.0, 2).final_plan.A
    np.testing.assert_allclose(A.sum(axis=0), 1.0, atol=1e-15)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-15)
    assert A[0, 0] == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-14)


def test_masked_teacher_example():
    c = _case(4, 3)
    active = np.array([True, True, False])
    plan = sinkhorn_run(c.Q, c.K, TeacherConfig(1.0, 4), active).final_plan
    assert np.all(plan.P[:, 2] == 0.0)
    np.testing.assert_allclose(plan.P[:, :2].sum(axis=0), 1 / 3, atol=1e-15)


@pytest.mark.parametrize("kernel", ["score", "quadratic_cost"])
def test_marginal_after_each_step(kernel):
    rng = np.random.default_rng(5)
    for k in range(20):
        N = int(rng.integers(2, 20))
        c = _case(100 + k, N, mask=0.3 if k % 2 else 0.0, scale=2.5)
        cfg = TeacherConfig(float(rng.choice([0.5, 1.0])), 9, kernel)
        pair = build_kernels(c.Q, c.K)
        trace = sinkhorn_run(c.Q, c.K, cfg, c.active, pair)
        mu, nu = ct.uniform_marginals(N, c.active)
        g0 = np.where(nu > 0, 0.0, -np.inf) + (pair.kappa if kernel == "score" else 0.0)
        for step in range(cfg.budget):
            f = trace.f_steps[step // 2]
            g = g0 if step == 0 else trace.g_steps[(step - 1) // 2]
            P = ct.gibbs_plan(f, g, pair.C, cfg.epsilon).P
            if step % 2 == 0:
                np.testing.assert_allclose(P.sum(axis=1), mu, atol=1e-12)
            else:
                np.testing.assert_allclose(P.sum(axis=0), nu, atol=1e-12)


@pytest.mark.parametrize("kernel", ["score", "quadratic_cost"])
def test_log_domain_matches_literal_recursion(kernel):
    rng = np.random.default_rng(6)
    for N in range(1, 7):
        for S in range(1, 7):
            c = _case(N * 10 + S, N, scale=2.0)
            eps = float(rng.choice([0.5, 1.0, 2.0]))
            pair = build_kernels(c.Q, c.K)
            active = None if N < 3 or S % 2 else np.arange(N) < N - 1
            M0 = np.exp(pair.S / eps) if kernel == "score" else np.exp(-pair.C / eps)
            A_lit = matrix_scaling(M0, S, active)
            A_log = sinkhorn_run(c.Q, c.K, TeacherConfig(eps, S, kernel), active, pair).final_plan.A
            assert np.linalg.norm(A_log - A_lit) <= 1e-10 * np.linalg.norm(A_lit)


def test_trace_replay_and_closure_invariants():
    for S in (2, 3, 4, 7, 10):
        c = _case(S, 12, mask=0.25 if S == 4 else 0.0)
        cfg = TeacherConfig(1.0, S)
        pair = build_kernels(c.Q, c.K)
        trace = sinkhorn_run(c.Q, c.K, cfg, c.active, pair)
        replay = ct.gibbs_plan(trace.f_steps[-1], trace.g_steps[-1], pair.C, 1.0).P
        assert np.linalg.norm(replay - trace.final_plan.P) <= 1e-10 * np.linalg.norm(trace.final_plan.P)
        f_T, plan_T = teacher_reference(trace, cfg, pair.C, c.active)
        assert abs(f_T.mean()) <= 1e-14
        assert np.linalg.norm(plan_T.P - trace.final_plan.P) <= 1e-10 * np.linalg.norm(trace.final_plan.P)
        if cfg.ending == "column":
            _, nu = ct.uniform_marginals(12, c.active)
            closed = ct.key_normalized_plan(trace.closure_ready_f + 3.7, pair.C, nu, 1.0).P
            assert np.linalg.norm(closed - trace.final_plan.P) <= 1e-10 * np.linalg.norm(trace.final_plan.P)


def test_shift_invariance_at_convergence_and_finite_budget_failure():
    rng = np.random.default_rng(8)
    for N in (3, 5, 8):
        c = _case(N, N)
        C = build_kernels(c.Q, c.K).C
        a, b = rng.standard_normal(N), rng.standard_normal(N)
        assert shift_gap(C, a, b, 1.0, 2000) <= 1e-8
        # Documented negative case: a three-step teacher depends on the cost representative.
        assert shift_gap(C, a, b, 1.0, 3) > 1e-8


def test_score_and_cost_teachers_agree_at_high_budget():
    for N in (4, 8):
        c = _case(N + 50, N)
        P = [sinkhorn_run(c.Q, c.K, TeacherConfig(1.0, 2000, k)).final_plan.P for k in ("score", "quadratic_cost")]
        assert np.linalg.norm(P[0] - P[1]) <= 1e-8 * np.linalg.norm(P[1])


def test_normalizer_forward_matches_trace_output_and_counts_passes():
    c = _case(9, 16)
    for S in (3, 20):
        with ct.count_passes() as counter:
            out = normalizer_forward(c.Q, c.K, c.V, S)
        assert sum(counter.values()) == S
        plan = sinkhorn_run(c.Q, c.K, TeacherConfig(1.0, S)).final_plan
        np.testing.assert_allclose(out, plan.A @ c.V, atol=1e-12)


def test_closure_ready_dual_single_step():
    c = _case(10, 5)
    pair = build_kernels(c.Q, c.K)
    trace = sinkhorn_run(c.Q, c.K, TeacherConfig(1.0, 1, "score"), kernels=pair)
    np.testing.assert_array_equal(center(trace.closure_ready_f), center(pair.rho))
