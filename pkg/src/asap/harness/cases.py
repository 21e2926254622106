"""Synthetic attention cases and their on-disk form."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

PROFILES = ("isotropic", "lowrank")


@dataclass(frozen=True)
class AttentionCase:
    """One head: ``Q``, ``K`` of shape ``(N, d_h)``, ``V`` of shape ``(N, d_v)``.

    ``active`` marks non-padded keys; ``None`` means every key is active.
    """

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    active: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.Q.shape[0]

    def permuted(self, perm) -> "AttentionCase":
        act = None if self.active is None else self.active[perm]
        return AttentionCase(self.Q[perm], self.K[perm], self.V[perm], act)


@dataclass(frozen=True)
class ActivationProfile:
    """How synthetic queries and keys are drawn.

    ``isotropic``: i.i.d. standard Gaussian entries times ``scale / sqrt(d_h)``.
    ``lowrank``: tokens on a random ``rank``-dimensional subspace, queries
    shifted by ``shift`` along its first axis, plus isotropic ``noise``, all
    times ``scale``. Low-rank heads with a query/key offset give sharp,
    slowly balancing kernels like those of trained Sinkhorn layers.
    """

    kind: str = "isotropic"
    scale: float = 1.0
    rank: int = 1
    noise: float = 0.1
    shift: float = 1.0

    def __post_init__(self):
        if self.kind not in PROFILES:
            raise ValueError(f"profile kind must be one of {PROFILES}, got {self.kind!r}")

    def to_dict(self):
        return asdict(self)


def gen_case(seed, N: int, d_h: int, d_v: int, mask_fraction: float = 0.0,
             profile: ActivationProfile | None = None) -> AttentionCase:
    """Deterministic synthetic head from ``seed`` (an int or a tuple of ints).

    The trailing ``ceil(mask_fraction * N)`` keys are padded.
    """
    if not 0.0 <= mask_fraction < 1.0:
        raise ValueError(f"mask_fraction must lie in [0, 1), got {mask_fraction}")
    profile = profile or ActivationProfile()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if profile.kind == "isotropic":
        s = profile.scale / math.sqrt(d_h)
        Q = rng.standard_normal((N, d_h)) * s
        K = rng.standard_normal((N, d_h)) * s
    else:
        U, _ = np.linalg.qr(rng.standard_normal((d_h, profile.rank)))
        Zq = rng.standard_normal((N, profile.rank))
        Zq[:, 0] += profile.shift
        Zk = rng.standard_normal((N, profile.rank))
        Q = profile.scale * (Zq @ U.T + profile.noise * rng.standard_normal((N, d_h)))
        K = profile.scale * (Zk @ U.T + profile.noise * rng.standard_normal((N, d_h)))
    V = rng.standard_normal((N, d_v)) / math.sqrt(d_h)
    n_pad = math.ceil(mask_fraction * N)
    active = None
    if n_pad:
        active = np.ones(N, dtype=bool)
        active[N - n_pad:] = False
    return AttentionCase(Q, K, V, active)


def save_case_file(path, heads: list[AttentionCase]) -> None:
    """Write the heads of one case to an ``.npz`` file (stacked along axis 0)."""
    arrays = {
        "Q": np.stack([h.Q for h in heads]),
        "K": np.stack([h.K for h in heads]),
        "V": np.stack([h.V for h in heads]),
    }
    if heads[0].active is not None:
        arrays["active"] = np.stack([h.active for h in heads])
    np.savez(Path(path), **arrays)


def load_case_file(path) -> list[AttentionCase]:
    with np.load(Path(path)) as z:
        Q, K, V = z["Q"], z["K"], z["V"]
        active = z["active"] if "active" in z.files else None
    return [AttentionCase(Q[h], K[h], V[h], None if active is None else active[h]) for h in range(Q.shape[0])]
