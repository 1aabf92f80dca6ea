"""SplitMix64 generator used for every row/column subsample and fold split.

Kept separate from numpy's generators so that subsample draws are a fixed,
documented function of the seed.
"""

import numba
import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


@numba.njit(cache=True)
def _splitmix_next(state):
    state = state + np.uint64(0x9E3779B97F4A7C15)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return state, z


@numba.njit(cache=True)
def _fisher_yates_prefix(state, n, k):
    perm = np.arange(n)
    for i in range(k):
        state, z = _splitmix_next(state)
        j = i + np.int64(z % np.uint64(n - i))
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    return state, perm[:k].copy()


@numba.njit(cache=True)
def _below_many(state, bound, count):
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        state, z = _splitmix_next(state)
        out[i] = np.int64(z % np.uint64(bound))
    return state, out


class SplitMix64:
    """64-bit SplitMix generator.

    >>> SplitMix64(0).next_u64()
    16294208416658607535
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Integer in [0, bound) by modulo reduction."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return self.next_u64() % bound

    def below_many(self, bound: int, count: int) -> np.ndarray:
        """``count`` successive :meth:`below` draws as an array."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        state, out = _below_many(np.uint64(self.state), np.uint64(bound), np.int64(count))
        self.state = int(state)
        return out

    def sample_prefix(self, n: int, k: int) -> np.ndarray:
        """First ``k`` entries of a Fisher-Yates shuffle of ``range(n)``.

        Equivalent to ``k`` draws without replacement; the generator state
        advances by exactly ``k`` steps.
        """
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} of {n} without replacement")
        if k == 0:
            return np.empty(0, dtype=np.int64)
        state, out = _fisher_yates_prefix(np.uint64(self.state), np.int64(n), np.int64(k))
        self.state = int(state)
        return out

    def permutation(self, n: int) -> np.ndarray:
        return self.sample_prefix(n, n)

    def spawn(self) -> "SplitMix64":
        """Independent child generator seeded from the next output."""
        return SplitMix64(self.next_u64())
