"""SplitMix64 random stream with uniform, normal and permutation helpers.

The stream is defined entirely by 64-bit integer arithmetic, so a given seed
yields the same raw sequence on every platform. The n-th output only depends
on ``seed + n * GOLDEN``, which lets us produce blocks of outputs with numpy
uint64 arithmetic that match the scalar recurrence exactly.
"""

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(z):
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z):
    # uint64 multiplication wraps modulo 2**64, as required
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class SeededRng:
    """Deterministic SplitMix64 generator.

    >>> r = SeededRng(1234567)
    >>> r.next_u64()
    6457827717110365317
    """

    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next_u64(self):
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def u64_block(self, n):
        """Next ``n`` raw outputs as a uint64 array (advances the state)."""
        n = int(n)
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN)
        with np.errstate(over="ignore"):
            out = _mix64_array(np.uint64(self.state) + steps)
        self.state = (self.state + n * GOLDEN) & MASK64
        return out

    def uniform(self, n=None):
        """Uniform doubles in [0, 1) built from the top 53 bits."""
        if n is None:
            return (self.next_u64() >> 11) * 2.0**-53
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, shape):
        """Standard normals via Box-Muller, consuming two uniforms per value."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape)
        u = self.uniform(2 * n)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape)

    def uniform_range(self, low, high, shape):
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        u = self.uniform(math.prod(shape)).reshape(shape)
        return low + (high - low) * u

    def rademacher(self, n):
        return np.where(self.u64_block(n) >> np.uint64(63), 1.0, -1.0)

    def randbelow(self, n):
        """Integer in [0, n) by multiply-shift on a 53-bit uniform."""
        return int(self.uniform() * n)

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        if n < 2:
            return np.array(perm, dtype=np.int64)
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)

    def poisson(self, lam):
        """Poisson draw by CDF inversion (fine for the small rates used here)."""
        if lam <= 0:
            return 0
        u = self.uniform()
        k, p = 0, math.exp(-lam)
        cdf = p
        while u >= cdf and k < 10_000:
            k += 1
            p *= lam / k
            cdf += p
        return k

    def child(self, stream):
        """Independent generator for a named integer substream."""
        return SeededRng(mix64((self.state ^ mix64((int(stream) * GOLDEN) & MASK64)) & MASK64))
