"""Randomized property checks shared by ``selftest`` and the acceptance suite.

Each check returns a :class:`CheckResult` with the worst observed margin so
a failure report says by how much a bound was missed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import ctransform as ct
from ..calibration import FitDataset, fit_kl, fit_ls, kl_objective
from ..metrics import ctransform_1d, generalized_kl, oracle_ot_1d, sorted_matching_cost
from ..numerics import center, sample_slice_bank
from ..sinkhorn import ScoreCostPair, TeacherConfig, build_kernels, sinkhorn_run
from ..sliced import slice_potential_1d
from .cases import ActivationProfile, gen_case


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.criterion}: {self.name} ({self.detail}; {self.seconds:.2f}s)"


def _random_head(rng, N, d_h=None, mask=False):
    d_h = d_h or int(rng.integers(2, 9))
    profile = ActivationProfile("isotropic", scale=float(rng.uniform(0.5, 3.0)))
    frac = float(rng.uniform(0.1, 0.6)) if mask and N > 1 else 0.0
    return gen_case(tuple(rng.integers(0, 2**31, size=2)), N, d_h, 3, frac, profile)


def _rel_fro(A, B) -> float:
    return float(np.linalg.norm(A - B) / np.linalg.norm(B))


def _timed(fn):
    def wrapper(*args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def check_marginals(seed: int = 1, cases: int = 200, tol: float = 1e-12) -> CheckResult:
    """Key-closed plans hit the key marginal; padded columns are exactly zero."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    nonzero_padded = 0
    for k in range(cases):
        N = int(rng.integers(2, 65))
        head = _random_head(rng, N, mask=bool(k % 2))
        C = build_kernels(head.Q, head.K).C
        eps = float(rng.choice([0.5, 1.0, 2.0]))
        f = rng.standard_normal(N) * float(rng.uniform(0.1, 5.0))
        mu, nu = ct.uniform_marginals(N, head.active)
        plans = [ct.key_normalized_plan(f, C, nu, eps, mu), ct.reconstruct(f, C, eps, "column", "asap0", head.active)]
        d = ct.two_sided(f, C, mu, nu, eps, "column")
        plans.append(ct.gibbs_plan(d.f, d.g, C, eps, mu, nu))
        plans.append(ct.reconstruct(f, C, eps, "column", "asap", head.active))
        for p in plans:
            worst = max(worst, float(np.max(np.abs(p.P.sum(axis=0) - nu))))
            if head.active is not None:
                nonzero_padded += int(np.count_nonzero(p.P[:, ~head.active]))
    ok = worst <= tol and nonzero_padded == 0
    return CheckResult(1, "marginal exactness", ok,
                       f"max |colsum - nu| = {worst:.2e}, nonzero padded entries = {nonzero_padded}")


@_timed
def check_teacher_recovery(seed: int = 2, per_budget: int = 12, tol: float = 1e-10) -> CheckResult:
    """The closure-ready teacher dual closed by ASAP-0 reproduces the teacher plan."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for S in (2, 4, 10, 20):
        for k in range(per_budget):
            N = int(rng.integers(2, 65))
            head = _random_head(rng, N, mask=bool(k % 3 == 2))
            kernel = "score" if k % 2 == 0 else "quadratic_cost"
            cfg = TeacherConfig(float(rng.choice([0.5, 1.0, 2.0])), S, kernel)
            pair = build_kernels(head.Q, head.K)
            trace = sinkhorn_run(head.Q, head.K, cfg, head.active, pair)
            plan = ct.reconstruct(center(trace.closure_ready_f), pair.C, cfg.epsilon, "column", "asap0", head.active)
            worst = max(worst, _rel_fro(plan.P, trace.final_plan.P))
    return CheckResult(2, "teacher recovery", worst <= tol, f"max rel Frobenius = {worst:.2e}")


@_timed
def check_oracle_1d(seed: int = 3, cases: int = 500, tol_cost: float = 1e-12, tol_dual: float = 1e-9) -> CheckResult:
    """Sorted matching is optimal and its potential is a tight feasible dual."""
    rng = np.random.default_rng(seed)
    worst_cost = worst_feas = worst_tight = 0.0
    for k in range(cases):
        N = int(rng.integers(1, 8))
        a = rng.standard_normal(N) * 2.0
        b = rng.standard_normal(N) * 2.0
        if k % 5 == 0:
            a = np.round(a)  # ties
        best, _ = oracle_ot_1d(a, b)
        worst_cost = max(worst_cost, abs(sorted_matching_cost(a, b) - best))
        f = slice_potential_1d(a, b)
        h = ctransform_1d(f, a, b)
        cost = 0.5 * (a[:, None] - b[None, :]) ** 2
        worst_feas = max(worst_feas, float(np.max(f[:, None] + h[None, :] - cost)))
        ia = np.argsort(a, kind="stable")
        ib = np.argsort(b, kind="stable")
        worst_tight = max(worst_tight, float(np.max(np.abs(f[ia] + h[ib] - cost[ia, ib]))))
    ok = worst_cost <= tol_cost and worst_feas <= tol_dual and worst_tight <= tol_dual
    return CheckResult(3, "1-D oracle", ok,
                       f"cost gap {worst_cost:.2e}, feasibility {worst_feas:.2e}, tightness {worst_tight:.2e}")


@_timed
def check_stability(seed: int = 4, cases: int = 200, slack: float = 1e-12) -> CheckResult:
    """Perturbation bounds on duals, plan ratios, row error, Pinsker and head outputs."""
    rng = np.random.default_rng(seed)
    viol = dict.fromkeys(("dual", "two_sided", "ratio", "row", "pinsker", "output"), -np.inf)
    for alpha in (0.01, 0.1, 1.0):
        for eps in (0.5, 1.0, 2.0):
            for _ in range(cases):
                N = int(rng.integers(2, 33))
                head = _random_head(rng, N)
                C = build_kernels(head.Q, head.K).C
                mu, nu = ct.uniform_marginals(N)
                f = rng.standard_normal(N) * float(rng.uniform(0.1, 3.0))
                delta = rng.uniform(-alpha, alpha, N)
                delta[rng.integers(N)] = alpha * rng.choice([-1.0, 1.0])
                fh = f + delta
                tol = slack * (1.0 + np.max(np.abs(f)) + np.max(C))

                g, gh = ct.key_ctransform(f, C, nu, eps), ct.key_ctransform(fh, C, nu, eps)
                viol["dual"] = max(viol["dual"], np.max(np.abs(gh - g)) - alpha - tol)
                d, dh = ct.two_sided(f, C, mu, nu, eps), ct.two_sided(fh, C, mu, nu, eps)
                g0, g0h = ct.key_ctransform(f, C, nu, eps), ct.key_ctransform(fh, C, nu, eps)
                for u, v in ((g0, g0h), (d.f, dh.f), (d.g, dh.g)):
                    viol["two_sided"] = max(viol["two_sided"], np.max(np.abs(v - u)) - alpha - tol)

                lo, hi = np.exp(-2 * alpha / eps), np.exp(2 * alpha / eps)
                P = ct.key_normalized_plan(f, C, nu, eps).P
                Ph = ct.key_normalized_plan(fh, C, nu, eps).P
                P2 = ct.gibbs_plan(d.f, d.g, C, eps).P
                P2h = ct.gibbs_plan(dh.f, dh.g, C, eps).P
                for r in (Ph / P, P2h / P2):
                    viol["ratio"] = max(viol["ratio"], lo * (1 - 1e-12) - r.min(), r.max() - hi * (1 + 1e-12))

                # Row error of the column-ending two-sided plan against its row-exact companion.
                R = ct.gibbs_plan(dh.f, g0h, C, eps).P
                row_l1 = np.abs(P2h.sum(axis=1) - mu).sum()
                gap_l1 = np.abs(P2h - R).sum()
                bound = np.expm1(np.max(np.abs(dh.g - g0h)) / eps)
                viol["row"] = max(viol["row"], row_l1 - gap_l1 - 1e-14, gap_l1 - bound - 1e-14)

                rho = np.abs(P.sum(axis=1) - mu).sum()
                rho_h = np.abs(Ph.sum(axis=1) - mu).sum()
                l1 = np.abs(Ph - P).sum()
                pinsker = np.sqrt(2.0 * max(generalized_kl(Ph, P), 0.0))
                viol["pinsker"] = max(viol["pinsker"], rho_h - rho - l1 - 1e-14, l1 - pinsker - 1e-12)

                V = rng.standard_normal((N, 3))
                B = np.max(np.linalg.norm(V, axis=1))
                dy = np.linalg.norm(N * (Ph - P) @ V, axis=1)
                mid = N * B * np.abs(Ph - P).sum(axis=1)
                top = N * B * np.expm1(2 * alpha / eps) * P.sum(axis=1)
                viol["output"] = max(viol["output"], np.max(dy - mid) - 1e-12, np.max(mid - top * (1 + 1e-12)) - 1e-14)
    ok = all(v <= 0 for v in viol.values())
    return CheckResult(4, "stability bounds", ok, ", ".join(f"{k} {v:+.1e}" for k, v in viol.items()))


def _small_dataset(rng, M=6, N=10, L=5, d_h=4, S=20, eps=1.0, keep_plans=True):
    bank = sample_slice_bank(int(rng.integers(0, 2**31)), L, d_h)
    heads = []
    for _ in range(M):
        h = _random_head(rng, N, d_h)
        heads.append((h.Q, h.K, h.active))
    return FitDataset.build(heads, bank, TeacherConfig(eps, S), keep_plans)


@_timed
def check_calibration(seed: int = 5, probes: int = 5) -> CheckResult:
    """LS oracle, KL gradient, convexity, comparator inequality and KL stationarity."""
    rng = np.random.default_rng(seed)
    ls_err = fd_err = 0.0
    convex = comparator = station = -np.inf
    for p in range(probes):
        data = _small_dataset(rng, M=int(rng.integers(2, 7)), N=int(rng.integers(4, 13)), S=int(rng.choice([2, 3, 20])),
                              eps=float(rng.choice([0.5, 1.0])))
        L = data.bank.L
        lam = float(rng.choice([1e-4, 1e-3, 1e-1]))

        layer = fit_ls(data, lam)
        X = np.vstack([ex.X for ex in data.examples])
        y = np.concatenate([ex.target for ex in data.examples])
        oracle = np.linalg.lstsq(np.vstack([X, np.sqrt(lam) * np.eye(L)]), np.concatenate([y, np.zeros(L)]), rcond=None)[0]
        ls_err = max(ls_err, float(np.linalg.norm(layer.omega - oracle) / max(np.linalg.norm(oracle), 1e-300)))

        w = rng.standard_normal(L)
        _, g = kl_objective(w, data, lam)
        fd = np.empty(L)
        h = 1e-5
        for i in range(L):
            e = np.zeros(L)
            e[i] = h
            fd[i] = (kl_objective(w + e, data, lam)[0] - kl_objective(w - e, data, lam)[0]) / (2 * h)
        fd_err = max(fd_err, float(np.linalg.norm(fd - g) / np.linalg.norm(g)))

        w1, w2 = rng.standard_normal(L) * 3, rng.standard_normal(L) * 3
        mid = kl_objective(0.5 * (w1 + w2), data, lam)[0]
        convex = max(convex, mid - 0.5 * (kl_objective(w1, data, lam)[0] + kl_objective(w2, data, lam)[0]) - 1e-12)

        MN = X.shape[0]
        lam_risk = lam / MN

        def risk(om):
            return float(np.sum((X @ om - y) ** 2)) / MN

        for _ in range(5):
            comp = rng.standard_normal(L) * float(rng.uniform(0.01, 3.0))
            comparator = max(comparator, risk(layer.omega) - risk(comp) - lam_risk * float(comp @ comp) - 1e-12)
        comparator = max(comparator, risk(layer.omega) - risk(oracle) - lam_risk * float(oracle @ oracle) - 1e-12)

        kl = fit_kl(data, lam)
        # Stationarity recomputed through the plan route, independently of the objective code.
        resid = lam * kl.omega
        for ex in data.examples:
            Phat = ct.key_normalized_plan(ex.X @ kl.omega, ex.C, ex.nu, data.teacher.epsilon).P
            resid = resid + ex.X.T @ (Phat.sum(axis=1) - ex.row_mass)
        station = max(station, float(np.max(np.abs(resid))) - kl.fit_stats["grad_threshold"] * (1 + 1e-6))
    ok = ls_err <= 1e-9 and fd_err <= 1e-6 and convex <= 0 and comparator <= 0 and station <= 0
    return CheckResult(5, "calibration", ok,
                       f"LS rel err {ls_err:.1e}, KL FD rel err {fd_err:.1e}, convexity {convex:+.1e}, "
                       f"comparator {comparator:+.1e}, stationarity {station:+.1e}")


def _run_on_cost(C, eps, S):
    N = C.shape[0]
    z = np.zeros(N)
    pair = ScoreCostPair(-C, C, z, z)
    return sinkhorn_run(np.zeros((N, 1)), np.zeros((N, 1)), TeacherConfig(eps, S, "quadratic_cost"), kernels=pair).final_plan.P


def shift_gap(C, a, b, eps: float, S: int) -> float:
    """Relative Frobenius gap between plans on ``C`` and ``C + a 1^T + 1 b^T``."""
    return _rel_fro(_run_on_cost(C + a[:, None] + b[None, :], eps, S), _run_on_cost(C, eps, S))


@_timed
def check_equivariance(seed: int = 8, cases: int = 10) -> CheckResult:
    """Permutation equivariance, converged shift invariance and its finite-budget failure."""
    rng = np.random.default_rng(seed)
    data = _small_dataset(rng, M=8, N=16, L=8, d_h=6, S=20)
    layer = fit_ls(data, 1e-3)
    perm_err = 0.0
    for _ in range(cases):
        N = int(rng.integers(2, 49))
        head = _random_head(rng, N, d_h=6)
        pi = rng.permutation(N)
        ph = head.permuted(pi)
        for mode in ct.MODES:
            out = layer.attend(head.Q, head.K, head.V, mode)
            perm_err = max(perm_err, float(np.max(np.abs(layer.attend(ph.Q, ph.K, ph.V, mode) - out[pi]))))
    converged = kernel_gap = 0.0
    finite = np.inf
    for _ in range(cases):
        N = int(rng.integers(3, 9))
        head = _random_head(rng, N, d_h=3)
        pair = build_kernels(head.Q, head.K)
        a, b = rng.standard_normal(N), rng.standard_normal(N)
        converged = max(converged, shift_gap(pair.C, a, b, 1.0, 2000))
        finite = min(finite, shift_gap(pair.C, a, b, 1.0, 3))
        P_score = sinkhorn_run(head.Q, head.K, TeacherConfig(1.0, 2000, "score"), kernels=pair).final_plan.P
        P_cost = sinkhorn_run(head.Q, head.K, TeacherConfig(1.0, 2000, "quadratic_cost"), kernels=pair).final_plan.P
        kernel_gap = max(kernel_gap, _rel_fro(P_score, P_cost))
    ok = perm_err <= 1e-10 and converged <= 1e-8 and finite > 1e-8 and kernel_gap <= 1e-8
    return CheckResult(8, "equivariance and invariance", ok,
                       f"perm err {perm_err:.1e}, S=2000 shift gap {converged:.1e}, "
                       f"S=3 min shift gap {finite:.1e} (must exceed 1e-8), kernel gap {kernel_gap:.1e}")


SELFTEST_CHECKS = (check_marginals, check_teacher_recovery, check_oracle_1d, check_stability,
                   check_calibration, check_equivariance)


def run_selftest(log=print) -> list[CheckResult]:
    results = []
    for check in SELFTEST_CHECKS:
        res = check()
        if log:
            log(res.line())
        results.append(res)
    return results
