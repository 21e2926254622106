"""Exact one-dimensional OT source potentials over a bank of slices."""

from __future__ import annotations

import numpy as np

from .numerics import SliceBank, sample_slice_bank, stable_argsort

__all__ = ["SliceBank", "sample_slice_bank", "slice_potential_1d", "feature_matrix", "projections"]


def slice_potential_1d(a, b) -> np.ndarray:
    """Source Kantorovich potential of the sorted matching under ``(a - b)^2 / 2``.

    With ``a`` and ``b`` sorted, ``phi_1 = 0``,
    ``phi_r = sum_{t<r} b_t (a_{t+1} - a_t)`` and ``f_r = a_r^2 / 2 - phi_r``.
    The result is returned in the original order of ``a`` and is not
    centered.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"a and b must be 1-D of equal length, got {a.shape} and {b.shape}")
    return _potentials(a[None, :], np.sort(b)[None, :])[0]


def _potentials(A: np.ndarray, B_sorted: np.ndarray) -> np.ndarray:
    # A: (L, N) projections in token order; B_sorted: (L, N) matched key values per rank.
    order = np.argsort(A, axis=1)
    A_sorted = np.take_along_axis(A, order, axis=1)
    if np.any(A_sorted[:, 1:] == A_sorted[:, :-1]):
        # Ties: keep equal projections in token order.
        order = stable_argsort(A, axis=1)
        A_sorted = np.take_along_axis(A, order, axis=1)
    phi = np.zeros_like(A_sorted)
    np.cumsum(B_sorted[:, :-1] * np.diff(A_sorted, axis=1), axis=1, out=phi[:, 1:])
    out = np.empty_like(A)
    np.put_along_axis(out, order, 0.5 * A_sorted**2 - phi, axis=1)
    return out


def projections(Q, K, bank: SliceBank) -> tuple[np.ndarray, np.ndarray]:
    """Scaled projections ``a = Q theta / d_h^{1/4}`` and ``b = K theta / d_h^{1/4}``."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.shape[1] != bank.d_h or K.shape[1] != bank.d_h:
        raise ValueError(f"bank has d_h={bank.d_h} but Q, K have {Q.shape[1]}, {K.shape[1]}")
    scale = bank.d_h ** -0.25
    return (Q @ bank.directions.T) * scale, (K @ bank.directions.T) * scale


def feature_matrix(Q, K, bank: SliceBank, active=None) -> np.ndarray:
    """Centered sliced potentials, one column per slice, shape ``(N, L)``.

    With a key mask, only active keys enter the 1-D key support. All ``N``
    queries stay; query rank ``r`` is matched to active-key rank
    ``floor(r |J| / N)``.
    """
    if bank.L < 1:
        raise ValueError("empty slice bank")
    A, B = projections(Q, K, bank)
    N = A.shape[0]
    if active is not None:
        active = np.asarray(active, dtype=bool)
        B = B[active]
        if B.shape[0] == 0:
            raise ValueError("active key set is empty")
    B_sorted = np.sort(B.T, axis=1)
    if B_sorted.shape[1] != N:
        B_sorted = B_sorted[:, (np.arange(N) * B_sorted.shape[1]) // N]
    X = _potentials(np.ascontiguousarray(A.T), B_sorted).T
    X -= X.mean(axis=0)
    return X
