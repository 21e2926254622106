"""Deterministic numerical primitives shared by every other module.

Everything here works in float64 and is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised by :func:`solve_spd` when the Cholesky factorization breaks down."""

    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite: leading minor of order {pivot} fails")


def logsumexp(v, axis=None, keepdims: bool = False):
    """Max-shifted ``log(sum(exp(v)))``.

    Entries may be ``-inf``. A slice that is entirely ``-inf`` reduces to
    ``-inf`` (masked key columns rely on this).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty array")
    m = np.max(v, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - m_safe), axis=axis, keepdims=True)) + m_safe
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    if out.ndim == 0:
        return float(out)
    return out


def center(v):
    """Zero-mean representative ``v - mean(v)``; for matrices, column-wise."""
    v = np.asarray(v, dtype=np.float64)
    return v - v.mean(axis=0)


def stable_argsort(v, axis: int = 0):
    """Argsort where equal keys keep their input order.

    Without ties the sorting permutation is unique, so the fast unstable
    sort is used and the stable one only reruns when ties are present.
    """
    v = np.asarray(v)
    order = np.argsort(v, axis=axis)
    if v.shape[axis] > 1 and np.any(np.diff(np.take_along_axis(v, order, axis=axis), axis=axis) == 0):
        order = np.argsort(v, axis=axis, kind="stable")
    return order


@dataclass(frozen=True)
class SliceBank:
    """Fixed unit directions used to slice queries and keys.

    ``directions`` has shape ``(L, d_h)``; row ``l`` is reproducible from
    ``(seed, l)`` alone, so a bank of size ``L`` is a prefix of any larger
    bank drawn with the same seed.
    """

    directions: np.ndarray
    seed: int

    @property
    def L(self) -> int:
        return self.directions.shape[0]

    @property
    def d_h(self) -> int:
        return self.directions.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SliceBank):
            return NotImplemented
        return self.seed == other.seed and np.array_equal(self.directions, other.directions)

    def __hash__(self):
        return hash((self.seed, self.directions.shape))


def _direction(seed: int, index: int, d_h: int) -> np.ndarray:
    attempt = 0
    while True:
        # Philox is counter based: (seed, slice index, attempt) fully determines the draw.
        bitgen = np.random.Philox(key=seed, counter=[index, attempt, 0, 0])
        z = np.random.Generator(bitgen).standard_normal(d_h)
        norm = np.sqrt(np.dot(z, z))
        if norm > 0.0:
            return z / norm
        attempt += 1


def sample_slice_bank(seed: int, L: int, d_h: int) -> SliceBank:
    """Draw ``L`` directions on the unit sphere in ``d_h`` dimensions."""
    if L < 1 or d_h < 1:
        raise ValueError(f"need L >= 1 and d_h >= 1, got L={L}, d_h={d_h}")
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    dirs = np.stack([_direction(int(seed), l, int(d_h)) for l in range(L)])
    dirs.setflags(write=False)
    return SliceBank(directions=dirs, seed=int(seed))


def solve_spd(G, b):
    """Solve ``G x = b`` for symmetric positive-definite ``G`` via Cholesky.

    Raises :class:`NotPositiveDefiniteError` carrying the 1-based index of
    the leading minor that failed.
    """
    G = np.asarray(G, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError(f"G must be square, got shape {G.shape}")
    if b.shape[0] != G.shape[0]:
        raise ValueError(f"b has length {b.shape[0]}, expected {G.shape[0]}")
    c, info = lapack.dpotrf(G, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(int(info))
    if info < 0:
        raise ValueError(f"invalid argument {-info} to dpotrf")
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs failed with info={info}")
    return x
