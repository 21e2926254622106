"""Fidelity and marginal metrics, plus brute-force oracles for the property suite.

Norm conventions (recorded in every report header):

* attention rel. l2 is ``||A_hat - A_T||_F / ||A_T||_F`` per head;
* output RMSE pools every entry of ``(A_hat - A_T) V``;
* per-case values average over heads.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

NORM_CONVENTIONS = {
    "attention_rel_l2": "frobenius",
    "output_rmse": "pooled over all output entries",
    "row_err": "mean_i |sum_j A_ij - 1|",
    "col_err": "mean over active keys |sum_i A_ij - 1|",
    "plan_kl": "KL(P_hat || P_teacher), generalized",
    "heads": "averaged within a case",
}


@dataclass
class CaseReport:
    operator: str
    case: int
    output_rmse: float
    attention_rel_l2: float
    row_err: float
    col_err: float
    plan_kl: float
    latency_ns: float = float("nan")

    def as_row(self) -> dict:
        return asdict(self)


def marginal_errors(A, active=None) -> tuple[float, float]:
    """Row and column marginal errors of an attention-scale matrix.

    ``row_err = mean_i |sum_j A_ij - 1|``; ``col_err`` averages
    ``|sum_i A_ij - 1|`` over active key columns only.
    """
    A = np.asarray(A, dtype=np.float64)
    row_err = float(np.mean(np.abs(A.sum(axis=1) - 1.0)))
    cols = A.sum(axis=0)
    if active is not None:
        cols = cols[np.asarray(active, dtype=bool)]
    col_err = float(np.mean(np.abs(cols - 1.0)))
    return row_err, col_err


def teacher_agreement(A_hat, A_T, V) -> tuple[float, float]:
    """``(output_rmse, attention_rel_l2)`` of one head against the teacher."""
    A_hat = np.asarray(A_hat, dtype=np.float64)
    A_T = np.asarray(A_T, dtype=np.float64)
    if A_hat.shape != A_T.shape:
        raise ValueError(f"shape mismatch {A_hat.shape} vs {A_T.shape}")
    diff = A_hat - A_T
    rmse = float(np.sqrt(np.mean((diff @ np.asarray(V, dtype=np.float64)) ** 2)))
    rel = float(np.linalg.norm(diff) / np.linalg.norm(A_T))
    return rmse, rel


def generalized_kl(P, R) -> float:
    """``sum P log(P/R) - P + R`` with ``0 log 0 = 0``."""
    P = np.asarray(P, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if P.shape != R.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {R.shape}")
    pos = P > 0
    if np.any(R[pos] <= 0):
        raise ValueError("R must be positive wherever P is positive")
    total = np.sum(R) - np.sum(P)
    total += np.sum(P[pos] * (np.log(P[pos]) - np.log(R[pos])))
    return float(total)


def oracle_ot_1d(a, b) -> tuple[float, tuple[int, ...]]:
    """Brute-force minimum of ``sum_i (a_i - b_sigma(i))^2 / 2`` over permutations.

    Only for ``N <= 8``. Among optimal permutations the lexicographically
    first is returned.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.shape[0]
    if b.shape[0] != n:
        raise ValueError("a and b must have equal length")
    if n > 8:
        raise ValueError("factorial enumeration is limited to N <= 8")
    cost = 0.5 * (a[:, None] - b[None, :]) ** 2
    best, best_perm = np.inf, None
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        c = cost[rows, perm].sum()
        if c < best:
            best, best_perm = c, perm
    return float(best), tuple(best_perm)


def sorted_matching_cost(a, b) -> float:
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    return float(0.5 * np.sum((a - b) ** 2))


def ctransform_1d(f, a, b) -> np.ndarray:
    """Key potential ``h_s = min_r [(a_r - b_s)^2 / 2 - f_r]`` conjugate to ``f``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.min(0.5 * (a[:, None] - b[None, :]) ** 2 - np.asarray(f)[:, None], axis=0)


def kl_density_beta(pi: np.ndarray, delta: np.ndarray, eps: float, grid: int = 257) -> float:
    """``N * max_{i,j,t} pi_{j,t}(i)`` over the exponential tilt of each column.

    ``pi`` holds the column conditionals (columns sum to one); the maximum
    over ``t in [0, 1]`` is taken on a uniform grid including both ends.
    """
    N = pi.shape[0]
    logpi = np.log(pi)
    best = 0.0
    for t in np.linspace(0.0, 1.0, grid):
        z = logpi + (t * delta / eps)[:, None]
        z -= z.max(axis=0)
        w = np.exp(z)
        w /= w.sum(axis=0)
        best = max(best, float(w.max()))
    return N * best
