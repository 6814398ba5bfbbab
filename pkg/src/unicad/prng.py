"""Seeded random numbers: xoshiro256** run as 1024 interleaved lanes.

Each lane is an independent xoshiro256** generator whose 256-bit state is
filled from splitmix64 seeded with ``seed + lane``. One ``step`` advances every
lane once, and the emitted stream is lane 0, lane 1, ... lane 1023, then the
next step. The lanes are vectorized with numpy uint64 arithmetic (wrapping), so
drawing tens of millions of values stays fast while the stream remains a pure
function of the seed.

Normals use Box-Muller on pairs of uniforms ``u = ((x >> 11) + 1) * 2**-53``,
which lie in (0, 1], emitting ``r*cos`` then ``r*sin``.
"""

from __future__ import annotations

import numpy as np

LANES = 1024
_M64 = (1 << 64) - 1


def splitmix64(x: int) -> tuple[int, int]:
    """Return ``(next_state, output)`` of one splitmix64 step."""
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return x, z ^ (z >> 31)


def mix_seed(seed: int, *tags: int | str) -> int:
    """Derive a 64-bit sub-seed from ``seed`` and a sequence of tags."""
    state = seed & _M64
    for tag in tags:
        if isinstance(tag, str):
            tag = int.from_bytes(tag.encode(), "little") & _M64
        state, out = splitmix64(state ^ (tag & _M64))
        state = out
    return state


def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Xoshiro:
    def __init__(self, seed: int):
        self.seed = int(seed) & _M64
        s = np.empty((4, LANES), dtype=np.uint64)
        for lane in range(LANES):
            st = (self.seed + lane) & _M64
            for w in range(4):
                st, out = splitmix64(st)
                s[w, lane] = out
        self._s = s
        self._buf = np.empty(0, dtype=np.uint64)

    def _step(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        with np.errstate(over="ignore"):
            result = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
            t = s1 << np.uint64(17)
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            self._s[3] = _rotl(s3, 45)
        return result

    def next_u64(self, n: int) -> np.ndarray:
        chunks = [self._buf]
        have = self._buf.size
        while have < n:
            out = self._step()
            chunks.append(out)
            have += out.size
        allv = np.concatenate(chunks)
        self._buf = allv[n:]
        return allv[:n]

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in (0, 1]."""
        x = self.next_u64(n)
        return ((x >> np.uint64(11)).astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]
        return (z * std).astype(dtype).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` using 64-bit draws."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.next_u64(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[k] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
