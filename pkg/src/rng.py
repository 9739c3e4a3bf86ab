"""Deterministic splitmix64 stream with Box-Muller normals

Every random quantity in the package (synthetic tokens, random partitions,
toy transformer weights, Monte Carlo samples) is drawn from this stream so
results depend only on (seed, parameters).
"""

from typing import List, Sequence, TypeVar

import numpy as np


T = TypeVar("T")

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = np.uint64(30), np.uint64(27), np.uint64(31), np.uint64(11)
_INV_2_53 = 1.0 / float(1 << 53)


def _mix(z: np.ndarray) -> np.ndarray:
    """splitmix64 output function; uint64 arithmetic wraps mod 2**64"""
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


class SplitMix64:
    """
    Counter-based splitmix64 generator

    Output k (1-based) is mix(seed + k * gamma), so a block of n outputs is
    computed in one vectorized step.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & MASK64
        self.position = 0

    def next_u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs"""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        counter = np.arange(self.position + 1, self.position + n + 1, dtype=np.uint64)
        self.position += n
        state = counter * GOLDEN_GAMMA + np.uint64(self.seed)
        return _mix(state)

    def next_uint(self) -> int:
        return int(self.next_u64(1)[0])

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) from the top 53 bits"""
        return (self.next_u64(n) >> _S11).astype(np.float64) * _INV_2_53

    def normal(self, n: int) -> np.ndarray:
        """
        n standard normals via Box-Muller

        Consecutive uniform pairs (u1, u2) yield (r cos 2πu2, r sin 2πu2) with
        r = sqrt(-2 ln(1 - u1)); an odd tail drops the last sine.
        """
        if n <= 0:
            return np.zeros(0, dtype=np.float64)
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def shuffle(self, items: Sequence[T]) -> List[T]:
        """Fisher-Yates shuffle returning a new list"""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.next_uint() % (i + 1)
            out[i], out[j] = out[j], out[i]
        return out


def derive_seed(seed: int, stream: int) -> int:
    """Seed of an independent substream (e.g. one per transformer block)"""
    state = np.array([stream + 1], dtype=np.uint64) * GOLDEN_GAMMA + np.uint64(int(seed) & MASK64)
    return int(_mix(state)[0])
