"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream, step, index, column)``, so a
sample's random inputs do not depend on how the sample population is chunked
or which thread evaluates it.  The generator is Philox4x32-10, vectorised with
numpy unsigned integer arithmetic.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)


def philox4x32(counter: np.ndarray, key: tuple[int, int], rounds: int = 10) -> np.ndarray:
    """Philox4x32 block function.

    ``counter`` has shape ``(n, 4)`` (uint32); returns ``(n, 4)`` uint32.
    """
    c = np.asarray(counter, dtype=np.uint32)
    c0, c1, c2, c3 = (c[:, i].astype(np.uint64) for i in range(4))
    k0 = np.uint32(key[0] & 0xFFFFFFFF)
    k1 = np.uint32(key[1] & 0xFFFFFFFF)
    with np.errstate(over="ignore"):
        for _ in range(rounds):
            p0 = c0 * _M0
            p1 = c2 * _M1
            hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
            hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
            c0 = hi1 ^ c1 ^ np.uint64(k0)
            c1 = lo1
            c2 = hi0 ^ c3 ^ np.uint64(k1)
            c3 = lo0
            k0 = np.uint32(k0 + _W0)
            k1 = np.uint32(k1 + _W1)
    return np.stack([c0, c1, c2, c3], axis=1).astype(np.uint32)


class CounterRNG:
    """Seeded family of counter-based streams.

    ``stream`` separates independent uses (initial states, raw samples,
    perception environment draws, bootstrap, ...); ``step`` is the time step
    or any second counter; ``index`` is the per-sample counter.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self._key = (self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF)

    def __repr__(self) -> str:
        return f"CounterRNG(seed={self.seed})"

    def bits(self, stream: int, step: int, index: np.ndarray, blocks: int) -> np.ndarray:
        """Raw uint32 words, shape ``(len(index), 4 * blocks)``."""
        index = np.asarray(index, dtype=np.uint64).ravel()
        n = index.size
        out = np.empty((n, 4 * blocks), dtype=np.uint32)
        ctr = np.empty((n, 4), dtype=np.uint32)
        ctr[:, 0] = (index & _MASK32).astype(np.uint32)
        ctr[:, 1] = (index >> _SHIFT32).astype(np.uint32)
        ctr[:, 2] = np.uint32(step & 0xFFFFFFFF)
        for b in range(blocks):
            ctr[:, 3] = np.uint32(((stream & 0xFFFF) << 16) | (b & 0xFFFF))
            out[:, 4 * b:4 * b + 4] = philox4x32(ctr, self._key)
        return out

    def uniform(self, stream: int, step: int, index, width: int) -> np.ndarray:
        """Uniform draws in the open interval (0, 1), shape ``(n, width)``.

        Each double takes 53 bits from two consecutive words.
        """
        if width == 0:
            return np.empty((np.asarray(index).size, 0))
        words = self.bits(stream, step, index, blocks=(width + 1) // 2)
        hi = words[:, 0::2][:, :width].astype(np.uint64) >> np.uint64(5)
        lo = words[:, 1::2][:, :width].astype(np.uint64) >> np.uint64(6)
        k = (hi << np.uint64(26)) | lo
        return (k.astype(np.float64) + 0.5) * 2.0 ** -53

    def normal(self, stream: int, step: int, index, width: int) -> np.ndarray:
        """Standard normal draws by inversion, shape ``(n, width)``."""
        return ndtri(self.uniform(stream, step, index, width))


# stream identifiers; fixed so that files produced by different commands agree
STREAM_INIT = 1
STREAM_NOISE = 2
STREAM_OTHER = 3
STREAM_ENV = 4
STREAM_FOLDS = 5
STREAM_BOOTSTRAP = 6
STREAM_SOBOL = 7
STREAM_L2 = 8
STREAM_HELDOUT = 9
