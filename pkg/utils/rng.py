"""Counter-based random substreams.

Every random decision in the lab comes from numpy's Philox4x64-10 bit
generator keyed by ``(seed, stream_id)``. The stream id is a splitmix64
fold of the substream path (e.g. ``("x0", 3)`` or ``("mc-inv", t)``), so a
draw depends only on the seed and its path, never on execution order.

Only the raw 64-bit words of the generator are used; the mapping to
integers, uniforms and normals is done here so the draws stay stable across
numpy releases.
"""
from typing import Sequence, Union

import numpy as np

MASK64 = 0xFFFF_FFFF_FFFF_FFFF
_TWO_POW_53 = float(1 << 53)

PathItem = Union[int, str]


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _item_word(item: PathItem) -> int:
    if isinstance(item, str):
        # FNV-1a over the utf-8 bytes
        h = 0xCBF29CE484222325
        for b in item.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & MASK64
        return h
    if isinstance(item, (bool, np.bool_)):
        raise TypeError("substream path items must be int or str")
    return int(item) & MASK64


def stream_id(path: Sequence[PathItem]) -> int:
    """Fold a substream path into a 64-bit stream identifier."""
    acc = 0x6A09E667F3BCC908
    for item in path:
        acc = _splitmix64(acc ^ _item_word(item))
    return acc


def derive_seed(seed: int, *path: PathItem) -> int:
    """Derive a child 64-bit seed from a parent seed and a path."""
    return _splitmix64((int(seed) & MASK64) ^ stream_id(path))


class Substream:
    """A Philox-backed stream for one ``(seed, path)`` pair."""

    def __init__(self, seed: int, *path: PathItem):
        self.seed = int(seed) & MASK64
        self.path = tuple(path)
        key = self.seed | (stream_id(self.path) << 64)
        self._bitgen = np.random.Philox(key=key)

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n), rejection-sampled to avoid modulo bias."""
        if n <= 0:
            raise ValueError(f"randbelow needs a positive bound, got {n}")
        threshold = ((1 << 64) - n) % n
        while True:
            word = int(self.raw(1)[0])
            if word >= threshold:
                return word % n

    def uniform(self, n: int = None, low: float = 0.0, high: float = 1.0):
        """Uniform draw(s) in [low, high) with 53-bit resolution."""
        count = 1 if n is None else n
        u = (self.raw(count) >> np.uint64(11)).astype(np.float64) / _TWO_POW_53
        out = low + (high - low) * u
        return float(out[0]) if n is None else out

    def normal(self, n: int) -> np.ndarray:
        """n standard normal draws via Box-Muller."""
        pairs = (n + 1) // 2
        words = self.raw(2 * pairs) >> np.uint64(11)
        u1 = (words[0::2].astype(np.float64) + 1.0) / _TWO_POW_53
        u2 = words[1::2].astype(np.float64) / _TWO_POW_53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
