"""Seeded randomness and small numeric helpers shared across the package.

Every random draw in the package goes through an :class:`RngStream`. A stream
is identified by a ``(seed, stream_id)`` pair and backed by a Philox
counter-based generator, so substreams can be derived by label without
depending on the order in which concurrent work is scheduled.
"""

from __future__ import annotations

import hashlib
import math
from collections.abc import Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_id(label: bytes | str) -> int:
    if isinstance(label, str):
        label = label.encode("utf-8")
    return int.from_bytes(hashlib.blake2b(label, digest_size=8).digest(), "little")


class RngStream:
    """A reproducible random stream keyed by ``(seed, stream_id)``.

    Not safe to share between threads; derive a child stream per task instead.
    """

    __slots__ = ("seed", "stream_id", "gen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.gen = np.random.Generator(np.random.Philox(key=(self.seed << 64) | self.stream_id))

    def child(self, label: bytes | str) -> RngStream:
        """Derive an independent substream. Does not consume draws from ``self``."""
        if isinstance(label, str):
            label = label.encode("utf-8")
        return RngStream(self.seed, _label_id(self.stream_id.to_bytes(8, "little") + b"/" + label))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id:#018x})"

    # thin delegation so callers rarely need ``.gen``
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def laplace(self, loc=0.0, scale=1.0, size=None):
        return self.gen.laplace(loc, scale, size)

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, x):
        return self.gen.permutation(x)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)


def derive_stream(master_seed: int, label: bytes | str) -> RngStream:
    """Stream for ``label`` under ``master_seed``; same inputs give the same draws."""
    return RngStream(master_seed, _label_id(label))


def sample_gaussian(rng: RngStream, mu: float, sigma: float) -> float:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return float(mu)
    return float(rng.gen.normal(mu, sigma))


def sample_laplace(rng: RngStream, scale: float) -> float:
    """One draw from Lap(0, scale); E|X| = scale."""
    if not scale > 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    return float(rng.gen.laplace(0.0, scale))


def entropy(counts: Sequence[int] | np.ndarray) -> float:
    """Shannon entropy in bits of a histogram, with 0 log 0 = 0."""
    c = np.asarray(counts, dtype=np.float64).ravel()
    if np.any(c < 0):
        raise ValueError("counts must be nonnegative")
    total = c.sum()
    if total <= 0:
        raise ValueError("histogram has no positive count")
    p = c[c > 0] / total
    h = -float(np.sum(p * np.log2(p)))
    return max(h, 0.0)


def cosine_distance(u, v) -> float:
    """``1 - cos(u, v)``, in [0, 2]."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    cos = float(np.dot(u, v) / (nu * nv))
    return 1.0 - min(1.0, max(-1.0, cos))


def check_finite(arr, name: str = "array") -> np.ndarray:
    """Checked mode: raise instead of letting NaN/Inf propagate."""
    a = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{name} contains NaN or Inf")
    return a


def log_add(a: float, b: float) -> float:
    """log(exp(a) + exp(b)) without overflow."""
    lo, hi = min(a, b), max(a, b)
    if lo == -math.inf:
        return hi
    return hi + math.log1p(math.exp(lo - hi))
