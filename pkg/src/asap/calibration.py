"""Offline sliced-dual projection and the compiled layer it produces.

A compiled layer stores a slice bank and a coefficient vector ``omega``.
Online it predicts the centered source dual ``center(X omega)`` from sliced
potentials and closes it with entropic c-transforms; the fitting objective
(least squares or one-sided KL) only changes ``omega``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ctransform as ct
from .numerics import SliceBank, center, solve_spd
from .sinkhorn import TeacherConfig, build_kernels, sinkhorn_run
from .sliced import feature_matrix

OBJECTIVES = ("LS", "KL")
SCHEMA = "asap.compiled_layer"
SCHEMA_VERSION = 1
_BLOCK = 64


@dataclass
class FitExample:
    """Cached per-head calibration data: features, cost and teacher targets."""

    X: np.ndarray
    target: np.ndarray
    C: np.ndarray | None = None
    row_mass: np.ndarray | None = None
    nu: np.ndarray | None = None


@dataclass
class FitDataset:
    examples: list[FitExample]
    bank: SliceBank
    teacher: TeacherConfig
    build_seconds: float = 0.0

    def __len__(self):
        return len(self.examples)

    @property
    def N_total(self) -> int:
        return sum(ex.X.shape[0] for ex in self.examples)

    @classmethod
    def build(cls, heads, bank: SliceBank, teacher: TeacherConfig, keep_plans: bool = True) -> "FitDataset":
        """Extract teacher duals and sliced features for each ``(Q, K, active)``.

        ``keep_plans`` caches the cost and teacher row masses needed by the KL
        objective; least squares only needs features and targets.
        """
        t0 = time.perf_counter()
        examples = []
        for Q, K, active in heads:
            pair = build_kernels(Q, K)
            trace = sinkhorn_run(Q, K, teacher, active=active, kernels=pair)
            f_T = center(trace.closure_ready_f)
            X = feature_matrix(Q, K, bank, active)
            ex = FitExample(X=X, target=f_T)
            if keep_plans:
                _, nu = ct.uniform_marginals(pair.C.shape[0], active)
                ref = ct.key_normalized_plan(f_T, pair.C, nu, teacher.epsilon)
                ex.C, ex.row_mass, ex.nu = pair.C, ref.P.sum(axis=1), nu
            examples.append(ex)
        return cls(examples, bank, teacher, time.perf_counter() - t0)


class NormalEquations:
    """Streaming ``G = sum X^T X``, ``b = sum X^T y`` accumulator."""

    def __init__(self, L: int):
        self.G = np.zeros((L, L))
        self.b = np.zeros(L)
        self.count = 0
        self.rows = 0

    def add(self, X, y):
        self.G += X.T @ X
        self.b += X.T @ y
        self.count += 1
        self.rows += X.shape[0]

    def solve(self, lam: float) -> np.ndarray:
        if not lam > 0:
            raise ValueError(f"ridge parameter must be positive, got {lam}")
        return solve_spd(self.G + lam * np.eye(self.G.shape[0]), self.b)


@dataclass
class CompiledLayer:
    bank: SliceBank
    omega: np.ndarray
    teacher: TeacherConfig
    objective: str = "LS"
    lam: float = 1e-3
    fit_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if self.omega.shape != (self.bank.L,):
            raise ValueError(f"omega has shape {self.omega.shape}, expected ({self.bank.L},)")
        if not np.all(np.isfinite(self.omega)):
            raise ValueError("omega must be finite")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")

    def predict_dual(self, Q, K, active=None) -> np.ndarray:
        return center(feature_matrix(Q, K, self.bank, active) @ self.omega)

    def plan(self, Q, K, mode: str = "asap", active=None) -> ct.TransportPlan:
        C = build_kernels(Q, K).C
        f_hat = self.predict_dual(Q, K, active)
        return ct.reconstruct(f_hat, C, self.teacher.epsilon, self.teacher.ending, mode, active)

    def attend(self, Q, K, V, mode: str = "asap", active=None) -> np.ndarray:
        """Compiled head output ``A_hat V``.

        Runs in score coordinates: the predicted dual is shifted by ``-rho``
        and the key-only shift cancels inside each column. ASAP-0 folds the
        column normalization into ``V``.
        """
        Q = np.asarray(Q, dtype=np.float64)
        K = np.asarray(K, dtype=np.float64)
        V = np.asarray(V, dtype=np.float64)
        eps = self.teacher.epsilon
        N, d_h = Q.shape
        root = np.sqrt(d_h)
        h = self.predict_dual(Q, K, active) - np.einsum("ij,ij->i", Q, Q) / (2.0 * root)
        _, nu = ct.uniform_marginals(N, active)
        if mode == "asap0":
            ct.tick("key")
            # [Q / (sqrt(d) eps), h / eps] @ [K, 1]^T adds the row shift inside the GEMM.
            Z = np.hstack([Q * (1.0 / (root * eps)), (h / eps)[:, None]]) @ np.hstack([K, np.ones((N, 1))]).T
            col_max = Z.max(axis=0)
            col_sum = np.zeros(N)
            # Shift, exponentiate and sum in row blocks that stay in cache.
            for r in range(0, N, _BLOCK):
                Zb = Z[r:r + _BLOCK]
                np.subtract(Zb, col_max, out=Zb)
                np.exp(Zb, out=Zb)
                col_sum += Zb.sum(axis=0)
            return Z @ (V * (N * nu / col_sum)[:, None])
        W = (Q @ K.T) * (-1.0 / root)
        plan = ct.reconstruct(h, W, eps, self.teacher.ending, mode, active)
        return ct.head_output(plan, V)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "version": SCHEMA_VERSION,
            "teacher": self.teacher.to_dict(),
            "bank": {
                "seed": self.bank.seed,
                "L": self.bank.L,
                "d_h": self.bank.d_h,
                "directions": self.bank.directions.tolist(),
            },
            "omega": self.omega.tolist(),
            "objective": self.objective,
            "lambda": self.lam,
            "fit_stats": self.fit_stats,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompiledLayer":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"not a compiled layer document (schema={d.get('schema')!r})")
        if d.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {d.get('version')!r}, expected {SCHEMA_VERSION}")
        bank_d = d["bank"]
        dirs = np.asarray(bank_d["directions"], dtype=np.float64)
        L, d_h = int(bank_d["L"]), int(bank_d["d_h"])
        if dirs.shape != (L, d_h):
            raise ValueError(f"bank directions have shape {dirs.shape}, expected ({L}, {d_h})")
        omega = np.asarray(d["omega"], dtype=np.float64)
        if omega.shape != (L,):
            raise ValueError(f"omega has length {omega.size}, expected L={L}")
        dirs.setflags(write=False)
        return cls(
            bank=SliceBank(dirs, int(bank_d["seed"])),
            omega=omega,
            teacher=TeacherConfig.from_dict(d["teacher"]),
            objective=d["objective"],
            lam=float(d["lambda"]),
            fit_stats=dict(d.get("fit_stats", {})),
        )


def fit_ls(data: FitDataset, lam: float = 1e-3) -> CompiledLayer:
    """Ridge fit of the centered teacher dual on the sliced features."""
    t0 = time.perf_counter()
    acc = NormalEquations(data.bank.L)
    for ex in data.examples:
        acc.add(ex.X, ex.target)
    omega = acc.solve(lam)
    resid = sum(float(np.sum((ex.X @ omega - ex.target) ** 2)) for ex in data.examples)
    stats = {
        "M": len(data),
        "residual": resid / max(acc.rows, 1),
        "fit_seconds": data.build_seconds + time.perf_counter() - t0,
    }
    return CompiledLayer(data.bank, omega, data.teacher, "LS", lam, stats)


def _column_softmax(f, C, eps):
    Z = (f[:, None] - C) / eps
    m = Z.max(axis=0)
    Z -= m
    np.exp(Z, out=Z)
    s = Z.sum(axis=0)
    Z /= s
    return Z, eps * (np.log(s) + m)


def kl_objective(omega, data: FitDataset, lam: float, hessian: bool = False):
    """One-sided plan KL objective, its gradient, and optionally its Hessian.

    ``J(w) = sum_m [F_m(X_m w) - <r_m, X_m w>] + lam/2 |w|^2`` with
    ``F_m(f) = eps sum_j nu_j logsumexp_i((-C_ij + f_i)/eps)``.
    """
    omega = np.asarray(omega, dtype=np.float64)
    eps = data.teacher.epsilon
    value = 0.5 * lam * float(omega @ omega)
    grad = lam * omega.copy()
    H = lam * np.eye(omega.size) if hessian else None
    for ex in data.examples:
        if ex.C is None:
            raise ValueError("dataset was built without teacher plans; rebuild with keep_plans=True")
        f = ex.X @ omega
        pi, lse = _column_softmax(f, ex.C, eps)
        value += float(ex.nu @ lse - ex.row_mass @ f)
        row_mass = pi @ ex.nu
        grad += ex.X.T @ (row_mass - ex.row_mass)
        if hessian:
            XtPi = ex.X.T @ pi
            H += (ex.X.T @ (row_mass[:, None] * ex.X) - (XtPi * ex.nu) @ XtPi.T) / eps
    if hessian:
        return value, grad, H
    return value, grad


def fit_kl(data: FitDataset, lam: float = 1e-3, max_iter: int = 2000, tol: float = 1e-8,
           armijo: float = 1e-4, init: np.ndarray | None = None) -> CompiledLayer:
    """Minimize the KL objective from the least-squares warm start.

    Each step moves along the Hessian-preconditioned descent direction and
    backtracks by halving until the Armijo condition holds. Stops once
    ``max|grad| <= tol * max(1, max|grad at init|)``.
    """
    t0 = time.perf_counter()
    if not lam > 0:
        raise ValueError(f"ridge parameter must be positive, got {lam}")
    omega = fit_ls(data, lam).omega if init is None else np.asarray(init, dtype=np.float64).copy()
    value, grad, H = kl_objective(omega, data, lam, hessian=True)
    threshold = tol * max(1.0, float(np.max(np.abs(grad))))
    converged = float(np.max(np.abs(grad))) <= threshold
    it = 0
    while not converged and it < max_iter:
        it += 1
        direction = -solve_spd(H, grad)
        slope = float(grad @ direction)
        step = 1.0
        accepted = False
        for _ in range(60):
            cand = omega + step * direction
            v_new, g_new, H_new = kl_objective(cand, data, lam, hessian=True)
            if v_new <= value + armijo * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # Round-off floor on the objective: keep a full step only if it shrinks the gradient.
            cand = omega + direction
            v_new, g_new, H_new = kl_objective(cand, data, lam, hessian=True)
            if np.max(np.abs(g_new)) >= np.max(np.abs(grad)):
                break
        omega, value, grad, H = cand, v_new, g_new, H_new
        converged = float(np.max(np.abs(grad))) <= threshold
    resid = sum(float(np.sum((ex.X @ omega - ex.target) ** 2)) for ex in data.examples)
    stats = {
        "M": len(data),
        "residual": resid / max(data.N_total, 1),
        "fit_seconds": data.build_seconds + time.perf_counter() - t0,
        "iterations": it,
        "converged": bool(converged),
        "grad_inf": float(np.max(np.abs(grad))),
        "grad_threshold": threshold,
        "objective_value": value,
    }
    return CompiledLayer(data.bank, omega, data.teacher, "KL", lam, stats)
