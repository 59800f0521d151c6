"""Keyed counter-based random streams (Philox4x32-10).

Every draw is a pure function of ``(seed, j, n, purpose, block)``: the seed is
the Philox key, and the counter words are ``(block, n, j, purpose)``.  A
particle's draws therefore do not depend on how many particles exist, which
backend runs them, or in which order they are requested.

Each counter block yields four 32-bit words, which become two 53-bit uniforms
and, through Box-Muller, two standard normals.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

from .errors import ConfigError

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
ROUNDS = 10


class Purpose(IntEnum):
    INIT = 0
    PROLIFERATE = 1
    INNOVATE = 2
    RESAMPLE = 3
    OBSERVE = 4


def philox4x32(counter, key, rounds: int = ROUNDS) -> np.ndarray:
    """Philox4x32 bijection on ``counter[..., 4]`` under ``key[..., 2]`` (uint32 words)."""
    c = np.asarray(counter, dtype=np.uint64) & _MASK32
    k = np.asarray(key, dtype=np.uint64) & _MASK32
    if c.shape[-1] != 4 or k.shape[-1] != 2:
        raise ConfigError("counter needs 4 words and key needs 2 words")
    c0, c1, c2, c3 = (c[..., i] for i in range(4))
    k0, k1 = k[..., 0], k[..., 1]
    for r in range(rounds):
        if r:
            k0 = (k0 + np.uint64(_W0)) & _MASK32
            k1 = (k1 + np.uint64(_W1)) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT32) ^ c1 ^ k0,
            p1 & _MASK32,
            (p0 >> _SHIFT32) ^ c3 ^ k1,
            p0 & _MASK32,
        )
    return np.stack(np.broadcast_arrays(c0, c1, c2, c3), axis=-1).astype(np.uint32)


def _split_seed(seed) -> tuple[int, int]:
    seed = int(seed)
    if seed < 0 or seed >= 1 << 64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    return seed & 0xFFFFFFFF, seed >> 32


class RngStreams:
    """Family of independent streams indexed by ``(j, n, purpose)``.

    >>> rs = RngStreams(42)
    >>> rs.normals(3, [0, 1], Purpose.INNOVATE, 5).shape
    (2, 5)
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._key = np.array(_split_seed(seed), dtype=np.uint64)

    def blocks(self, j: int, ns, purpose: int, nblocks: int) -> np.ndarray:
        """Raw output words, shape ``(len(ns), nblocks, 4)``."""
        if j < 0 or j >= 1 << 32:
            raise ConfigError("time index out of range")
        ns = np.atleast_1d(np.asarray(ns, dtype=np.int64))
        if ns.size and (ns.min() < 0 or ns.max() >= 1 << 32):
            raise ConfigError("particle index out of range")
        ctr = np.empty((ns.size, nblocks, 4), dtype=np.uint64)
        ctr[..., 0] = np.arange(nblocks, dtype=np.uint64)[None, :]
        ctr[..., 1] = ns.astype(np.uint64)[:, None]
        ctr[..., 2] = np.uint64(j)
        ctr[..., 3] = np.uint64(int(purpose))
        return philox4x32(ctr, self._key)

    def uniforms(self, j: int, ns, purpose: int, k: int) -> np.ndarray:
        """``k`` uniforms in ``[0, 1)`` per index in ``ns``; shape ``(len(ns), k)``."""
        words = self.blocks(j, ns, purpose, (k + 1) // 2).astype(np.uint64)
        hi = words[..., 0::2] >> np.uint64(5)
        lo = words[..., 1::2] >> np.uint64(6)
        u = (hi * np.uint64(1 << 26) + lo).astype(np.float64) * 2.0**-53
        return u.reshape(u.shape[0], -1)[:, :k]

    def normals(self, j: int, ns, purpose: int, k: int) -> np.ndarray:
        """``k`` standard normals per index via Box-Muller; shape ``(len(ns), k)``."""
        m = (k + 1) // 2
        u = self.uniforms(j, ns, purpose, 2 * m).reshape(-1, m, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[..., 0]))
        ang = 2.0 * np.pi * u[..., 1]
        z = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1)
        return z.reshape(z.shape[0], -1)[:, :k]
