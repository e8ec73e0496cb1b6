"""Deterministic random streams, vector helpers, and Gaussian densities.

Every stochastic component in the package draws from an :class:`RngStream`.
Streams are keyed Philox counters, so a (seed, label-path) pair fully
determines the draw sequence regardless of platform or build flags.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

LOG_TWO_PI = math.log(2.0 * math.pi)

# 53-bit mantissa conversion; +1 keeps Box-Muller's log() argument in (0, 1].
_INV_2_53 = 1.0 / (1 << 53)


def _label_to_stream(label) -> int:
    """Map a child label (int or str) to a stable 64-bit stream id."""
    if isinstance(label, (int, np.integer)):
        data = b"i" + int(label).to_bytes(8, "little", signed=False)
    else:
        data = b"s" + str(label).encode("utf-8")
    digest = hashlib.blake2b(data, digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RngStream:
    """Counter-based random stream (Philox 4x64-10, fixed published constants).

    A stream is identified by ``(seed, stream)``; distinct ids never share
    counter space, so per-experiment and per-batch children are independent
    by construction.  Instances are single-owner: do not share one stream
    across concurrent tasks.
    """

    seed: int
    stream: int = 0
    _bitgen: np.random.Philox = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        self.seed = int(self.seed)
        self.stream = int(self.stream) % 2**64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)

    def child(self, label) -> "RngStream":
        """Derive an independent stream for a named sub-task.

        The child id mixes this stream's id with the label, so distinct
        paths through the split tree land on distinct Philox keys.
        """
        mixed = _label_to_stream((self.stream, "/", label).__repr__())
        return RngStream(self.seed, mixed)

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n)

    def uniform(self, shape=None) -> np.ndarray | float:
        """Uniform doubles in [0, 1) from the top 53 bits of each counter word."""
        if shape is None:
            return float((int(self.raw(1)[0]) >> 11) * _INV_2_53)
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape)

    def normal(self, shape=None) -> np.ndarray | float:
        """Standard normal draws via Box-Muller with a fixed branch order.

        Pairs are generated as (r cos, r sin) and interleaved; no spare is
        cached across calls, so the draw sequence depends only on the call
        sequence.
        """
        scalar = shape is None
        shape = (1,) if scalar else ((shape,) if isinstance(shape, int) else tuple(shape))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (n + 1) // 2
        raw = self.raw(2 * pairs)
        u1 = ((raw[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * math.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(ang)
        out[1::2] = r * np.sin(ang)
        if scalar:
            return float(out[0])
        return out[:n].reshape(shape)

    def integers(self, n, high: int) -> np.ndarray:
        """Uniform integers in [0, high) via the floor of scaled uniforms."""
        if high <= 0:
            raise ValueError("high must be positive")
        u = self.uniform(n)
        return np.minimum((u * high).astype(np.int64), high - 1)


def as_vector(x, d: int | None = None) -> np.ndarray:
    """Coerce to a float64 1-D vector, optionally checking the dimension."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if d is not None and v.shape[0] != d:
        raise ValueError(f"expected dimension {d}, got {v.shape[0]}")
    if v.shape[0] < 1:
        raise ValueError("vectors must have dimension >= 1")
    return v


def require_finite(x, what: str = "value") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite components")
    return x


def sample_standard_normal(rng: RngStream, d: int) -> np.ndarray:
    """One draw from N(0, I_d)."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    return rng.normal(d)


def standard_normal_nll(x) -> float:
    """Negative log density of N(0, I) at x: (d/2) log(2 pi) + ||x||^2 / 2."""
    v = np.asarray(x, dtype=np.float64)
    require_finite(v, "input to standard_normal_nll")
    d = v.shape[-1] if v.ndim else 1
    return float(0.5 * d * LOG_TWO_PI + 0.5 * np.sum(v * v, axis=-1))
