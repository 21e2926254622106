"""Entropic c-transforms, Gibbs plans and compiled-plan reconstruction.

All duals live in cost units: a plan is ``exp((-C + f_i + g_j) / eps)``.
Padded key columns carry ``g_j = -inf`` and therefore exactly zero mass.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .numerics import logsumexp

MODES = ("asap0", "asap")

_pass_counter: contextvars.ContextVar[Counter | None] = contextvars.ContextVar(
    "asap_pass_counter", default=None
)


@contextlib.contextmanager
def count_passes():
    """Count normalization passes executed inside the block.

    Yields a :class:`collections.Counter` keyed by ``"key"``, ``"source"``,
    ``"row"`` and ``"column"``; ``sum(counter.values())`` is the number of
    dense O(N^2) normalization passes.
    """
    counter: Counter = Counter()
    token = _pass_counter.set(counter)
    try:
        yield counter
    finally:
        _pass_counter.reset(token)


def tick(kind: str, n: int = 1) -> None:
    counter = _pass_counter.get()
    if counter is not None:
        counter[kind] += n


@dataclass(frozen=True)
class TransportPlan:
    """Coupling ``P`` in transport units together with its declared marginals."""

    P: np.ndarray
    mu: np.ndarray
    nu: np.ndarray

    @property
    def N(self) -> int:
        return self.P.shape[0]

    @property
    def A(self) -> np.ndarray:
        """Attention-scale matrix ``N * P``."""
        return self.N * self.P


@dataclass(frozen=True)
class DualPotentials:
    f: np.ndarray
    g: np.ndarray
    epsilon: float
    side_history: tuple[str, ...] = ()


def uniform_marginals(N: int, active=None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(mu, nu)``: ``1/N`` everywhere, except ``nu_j = 0`` on padded keys."""
    mu = np.full(N, 1.0 / N)
    nu = np.full(N, 1.0 / N)
    if active is not None:
        active = np.asarray(active, dtype=bool)
        if active.shape != (N,):
            raise ValueError(f"active mask must have shape ({N},), got {active.shape}")
        if not active.any():
            raise ValueError("active key set is empty")
        nu[~active] = 0.0
    return mu, nu


def _log_marginal(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("marginal has negative entries")
    if not np.any(m > 0):
        raise ValueError("marginal is identically zero")
    with np.errstate(divide="ignore"):
        return np.log(m)


def key_ctransform(f, C, nu, eps: float) -> np.ndarray:
    """Key dual making every column of the Gibbs plan sum to ``nu``.

    ``g_j = eps log nu_j - eps logsumexp_i((-C_ij + f_i)/eps)``, and
    ``g_j = -inf`` wherever ``nu_j = 0``.
    """
    C = np.asarray(C, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    log_nu = _log_marginal(nu)
    tick("key")
    g = eps * log_nu - eps * logsumexp((f[:, None] - C) / eps, axis=0)
    g[~np.isfinite(log_nu)] = -np.inf
    return g


def source_ctransform(g, C, mu, eps: float) -> np.ndarray:
    """Source dual making every row of the Gibbs plan sum to ``mu``."""
    C = np.asarray(C, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    log_mu = _log_marginal(mu)
    tick("source")
    f = eps * log_mu - eps * logsumexp((g[None, :] - C) / eps, axis=1)
    f[~np.isfinite(log_mu)] = -np.inf
    return f


def gibbs_plan(f, g, C, eps: float, mu=None, nu=None) -> TransportPlan:
    """Literal ``P_ij = exp((-C_ij + f_i + g_j)/eps)`` with ``exp(-inf) = 0``."""
    C = np.asarray(C, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if C.shape != (f.shape[0], g.shape[0]):
        raise ValueError(f"shape mismatch: C {C.shape}, f {f.shape}, g {g.shape}")
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    N = C.shape[0]
    mu_d, nu_d = uniform_marginals(N)
    return TransportPlan(P, mu_d if mu is None else np.asarray(mu), nu_d if nu is None else np.asarray(nu))


def key_normalized_plan(f, C, nu, eps: float, mu=None) -> TransportPlan:
    """One-sided plan ``Gibbs(f, T_K(f))`` in column-softmax form.

    ``P_ij = nu_j * softmax_i((-C_ij + f_i)/eps)``; one dense pass.
    """
    C = np.asarray(C, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    _log_marginal(nu)
    tick("key")
    Z = (f[:, None] - C) / eps
    Z -= Z.max(axis=0)
    np.exp(Z, out=Z)
    Z *= nu / Z.sum(axis=0)
    N = C.shape[0]
    return TransportPlan(Z, np.full(N, 1.0 / N) if mu is None else np.asarray(mu), nu)


def two_sided(f, C, mu, nu, eps: float, ending: str = "column") -> DualPotentials:
    """Key -> source (-> key) closure starting from a source dual.

    Column-ending returns ``(f+, g+)`` (three transforms); row-ending returns
    ``(f+, g0)`` (two transforms).
    """
    g0 = key_ctransform(f, C, nu, eps)
    f_plus = source_ctransform(g0, C, mu, eps)
    if ending == "row":
        return DualPotentials(f_plus, g0, eps, ("key", "source"))
    if ending != "column":
        raise ValueError(f"ending must be 'row' or 'column', got {ending!r}")
    g_plus = key_ctransform(f_plus, C, nu, eps)
    return DualPotentials(f_plus, g_plus, eps, ("key", "source", "key"))


def reconstruct(f_hat, C, eps: float, ending: str = "column", mode: str = "asap", active=None) -> TransportPlan:
    """Compiled attention plan from a predicted source dual.

    ``mode="asap0"`` closes only the key side. ``mode="asap"`` applies the
    two-sided transform with the teacher's ending side.
    """
    C = np.asarray(C, dtype=np.float64)
    mu, nu = uniform_marginals(C.shape[0], active)
    if mode == "asap0":
        return key_normalized_plan(f_hat, C, nu, eps, mu=mu)
    if mode != "asap":
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    duals = two_sided(f_hat, C, mu, nu, eps, ending)
    return gibbs_plan(duals.f, duals.g, C, eps, mu=mu, nu=nu)


def head_output(plan: TransportPlan | np.ndarray, V) -> np.ndarray:
    """Head output ``A V`` with ``A = N P``."""
    A = plan.A if isinstance(plan, TransportPlan) else np.asarray(plan)
    V = np.asarray(V, dtype=np.float64)
    if A.shape[1] != V.shape[0]:
        raise ValueError(f"attention has {A.shape[1]} keys but V has {V.shape[0]} rows")
    return A @ V
