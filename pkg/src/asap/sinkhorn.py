"""Finite-budget Sinkhorn teacher.

The teacher runs alternating row/column normalization in the log-potential
domain, step ``l`` even updating the source dual and step ``l`` odd the key
dual, starting from zero potentials. A score-kernel teacher runs on
``exp(s / eps)``; its potentials are converted to cost units before they
are exposed, so every dual leaving this module satisfies
``P = exp((-C + f + g) / eps)`` with the quadratic cost ``C``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ctransform import (
    TransportPlan,
    gibbs_plan,
    key_normalized_plan,
    source_ctransform,
    key_ctransform,
    tick,
    two_sided,
    uniform_marginals,
)
from .numerics import center

KERNELS = ("score", "quadratic_cost")


@dataclass(frozen=True)
class TeacherConfig:
    """Finite Sinkhorn convention of a frozen layer.

    The ending side is derived from the budget: an even budget ends on a
    column normalization.
    """

    epsilon: float = 1.0
    budget: int = 20
    kernel: str = "score"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.budget) != self.budget or self.budget < 1:
            raise ValueError(f"budget must be a positive integer, got {self.budget}")
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")

    @property
    def ending(self) -> str:
        return "column" if self.budget % 2 == 0 else "row"

    def with_budget(self, budget: int) -> "TeacherConfig":
        return TeacherConfig(self.epsilon, budget, self.kernel)

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "budget": self.budget, "kernel": self.kernel}

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherConfig":
        return cls(float(d["epsilon"]), int(d["budget"]), str(d["kernel"]))


@dataclass(frozen=True)
class ScoreCostPair:
    """Scores ``s``, quadratic costs ``C`` and the shifts with ``-C = s - rho - kappa``."""

    S: np.ndarray
    C: np.ndarray
    rho: np.ndarray
    kappa: np.ndarray

    def working_cost(self, kernel: str) -> np.ndarray:
        """Matrix the scaling loop exponentiates (negated): ``-s`` or ``C``."""
        return -self.S if kernel == "score" else self.C


def build_kernels(Q, K) -> ScoreCostPair:
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.ndim != 2 or K.ndim != 2 or Q.shape[1] != K.shape[1]:
        raise ValueError(f"Q and K must be (N, d_h) with matching d_h, got {Q.shape} and {K.shape}")
    if Q.shape[0] < 1:
        raise ValueError("need at least one token")
    root = np.sqrt(Q.shape[1])
    S = (Q @ K.T) / root
    rho = np.einsum("ij,ij->i", Q, Q) / (2.0 * root)
    kappa = np.einsum("ij,ij->i", K, K) / (2.0 * root)
    C = rho[:, None] + kappa[None, :] - S
    return ScoreCostPair(S, C, rho, kappa)


@dataclass(frozen=True)
class SinkhornTrace:
    """Per-step potentials (cost units) of one finite Sinkhorn run."""

    f_steps: list = field(repr=False)
    g_steps: list = field(repr=False)
    closure_ready_f: np.ndarray = field(repr=False)
    final_f: np.ndarray = field(repr=False)
    final_g: np.ndarray = field(repr=False)
    final_plan: TransportPlan = field(repr=False)
    budget: int = 0


def sinkhorn_run(Q, K, cfg: TeacherConfig, active=None, kernels: ScoreCostPair | None = None) -> SinkhornTrace:
    """Run ``cfg.budget`` normalization steps and record the potentials.

    Padded keys (``active[j]`` false) start at ``g_j = -inf`` and receive
    the key target ``nu_j = 0``; all query rows keep ``mu_i = 1/N``.
    """
    pair = build_kernels(Q, K) if kernels is None else kernels
    N = pair.C.shape[0]
    mu, nu = uniform_marginals(N, active)
    W = pair.working_cost(cfg.kernel)
    eps = cfg.epsilon
    row_shift = pair.rho if cfg.kernel == "score" else np.zeros(N)
    col_shift = pair.kappa if cfg.kernel == "score" else np.zeros(N)

    f = np.zeros(N)
    g = np.where(nu > 0, 0.0, -np.inf)
    f_steps, g_steps = [], []
    for step in range(cfg.budget):
        if step % 2 == 0:
            f = source_ctransform(g, W, mu, eps)
            f_steps.append(f + row_shift)
        else:
            g = key_ctransform(f, W, nu, eps)
            g_steps.append(g + col_shift)

    if cfg.ending == "column":
        closure_ready = f_steps[-1]
    elif len(f_steps) >= 2:
        # Row-ending: the source dual before the final key + row closures.
        closure_ready = f_steps[-2]
    else:
        closure_ready = row_shift.copy()

    f_cost = f + row_shift
    g_cost = g + col_shift
    plan = gibbs_plan(f, g, W, eps, mu=mu, nu=nu)
    return SinkhornTrace(f_steps, g_steps, closure_ready, f_cost, g_cost, plan, cfg.budget)


def teacher_reference(trace: SinkhornTrace, cfg: TeacherConfig, C, active=None):
    """Centered closure-ready source dual and the plan its final-side closure gives.

    For column-ending budgets the plan is the key-normalized Gibbs plan and
    equals ``trace.final_plan``. For row-ending budgets of at least three
    steps it is the row-ending two-sided closure, which also reproduces the
    teacher; a single-step teacher has no closure-ready dual to recover.
    """
    f_T = center(trace.closure_ready_f)
    mu, nu = uniform_marginals(np.shape(C)[0], active)
    if cfg.ending == "column":
        plan = key_normalized_plan(f_T, C, nu, cfg.epsilon, mu=mu)
    else:
        duals = two_sided(f_T, C, mu, nu, cfg.epsilon, ending="row")
        plan = gibbs_plan(duals.f, duals.g, C, cfg.epsilon, mu=mu, nu=nu)
    return f_T, plan


def matrix_scaling(M0, budget: int, active=None) -> np.ndarray:
    """Literal alternating row/column normalization of a positive kernel.

    Returns the attention-scale matrix after ``budget`` steps (rows, then
    columns, ...). Padded key columns are zeroed and never renormalized.
    """
    A = np.array(M0, dtype=np.float64, copy=True)
    if active is not None:
        active = np.asarray(active, dtype=bool)
        A[:, ~active] = 0.0
    for step in range(budget):
        if step % 2 == 0:
            tick("row")
            A /= A.sum(axis=1, keepdims=True)
        else:
            tick("column")
            if active is None:
                A /= A.sum(axis=0, keepdims=True)
            else:
                A[:, active] /= A[:, active].sum(axis=0, keepdims=True)
    return A


def normalizer_forward(Q, K, V, budget: int, eps: float = 1.0) -> np.ndarray:
    """Timed Sinkhorn normalizer baseline on the score kernel.

    Forms scores, exponentiates once, runs ``budget`` dense normalization
    passes and multiplies by ``V``.
    """
    Z = Q @ K.T
    Z *= 1.0 / (np.sqrt(Q.shape[1]) * eps)
    # A per-row shift cancels in the first row normalization.
    Z -= Z.max(axis=1, keepdims=True)
    np.exp(Z, out=Z)
    for step in range(budget):
        if step % 2 == 0:
            tick("row")
            Z /= Z.sum(axis=1, keepdims=True)
        else:
            tick("column")
            Z /= Z.sum(axis=0, keepdims=True)
    return Z @ V
