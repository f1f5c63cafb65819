"""Seeded, platform-independent random number generation.

The generator is SplitMix64 (Steele, Lea & Flood 2014; reference code by
S. Vigna).  With state ``s`` the k-th output is::

    s += 0x9E3779B97F4A7C15            (mod 2**64)
    z = s
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

Because the state advances by a fixed increment, a block of outputs can be
produced in one vectorized step.  Seed 1234567 yields the published sequence
6457827717110365317, 3203168211198807973, 9817491932198370423, ...

Doubles are formed from the top 53 bits, normals by Box-Muller.
"""

import numpy as np

__all__ = ["SeededRng", "GOLDEN_GAMMA", "derive_seed"]

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(master, index):
    """Child seed for item ``index`` of a batch seeded with ``master``.

    Order-independent: the child seed depends only on ``(master, index)``.
    """
    rng = SeededRng((master + (index + 1) * 0xD1B54A32D192ED03) & _MASK)
    return int(rng.next_uint64(1)[0])


class SeededRng:
    """SplitMix64 stream.

    Parameters
    ----------
    seed : int
        Unsigned 64-bit seed; reduced modulo 2**64.
    """

    def __init__(self, seed):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed) & _MASK
        self._state = self.seed

    def __repr__(self):
        return f"SeededRng(seed={self.seed})"

    def next_uint64(self, n):
        """Next ``n`` raw 64-bit outputs as a ``uint64`` array."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self._state) + steps * np.uint64(GOLDEN_GAMMA)
            out = _mix(states)
        self._state = (self._state + n * GOLDEN_GAMMA) & _MASK
        return out

    def uniform(self, size=None, low=0.0, high=1.0):
        """Uniform doubles in ``[low, high)``."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None):
        """Standard normal doubles (Box-Muller, two uniforms per pair)."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # in (0, 1]
        u2 = u[m:]
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, low, high):
        """One integer uniformly from ``[low, high)``."""
        if high <= low:
            raise ValueError("empty range")
        return low + int(self.next_uint64(1)[0] % np.uint64(high - low))

    def permutation(self, n):
        """Random permutation of ``range(n)`` (Fisher-Yates)."""
        perm = np.arange(n)
        u = self.uniform(max(n - 1, 0))
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def unit_vector(self, shape):
        """Gaussian direction normalized to unit Euclidean norm."""
        v = self.normal(shape)
        return v / np.linalg.norm(v)
