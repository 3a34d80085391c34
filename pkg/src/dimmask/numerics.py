"""Float64 kernels and a counter-based random source.

Everything downstream assumes 64-bit floats and bitwise reproducibility:
the same seed must give the same training run regardless of platform or of
the order layers happen to be evaluated in.  The random source is therefore
a stateless mixer indexed by (seed, stream key, counter) instead of a
sequential generator with shared state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15  # golden-ratio increment, the usual Weyl constant
_INV53 = 1.0 / float(1 << 53)


def sigmoid(x):
    """Numerically stable logistic function, elementwise.

    Stable for |x| up to ~700: exp is only ever taken of -|x|.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return out if out.ndim else float(out)


def softplus(x):
    """log(1 + exp(x)) without overflow, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def _mix64(x: int) -> int:
    # SplitMix64 finalizer on a Python int (masked to 64 bits).
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix64_array(x: np.ndarray) -> np.ndarray:
    # Same finalizer vectorized; uint64 array ops wrap silently, which is what we want.
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


@dataclass
class RngStream:
    """Counter-based uniform source: draw i of stream (seed, key) is a pure
    function of (seed, key, counter+i), so any window can be replayed and
    distinct keys can be consumed in any order without interacting.

    The stream word is mix64(base + counter * GAMMA) with
    base = mix64(seed ^ mix64(key ^ GAMMA)); mixing the key separately keeps
    streams with different keys from being lagged copies of one another.
    """

    seed: int
    key: int = 0
    counter: int = 0

    def __post_init__(self):
        self._base = _mix64(self.seed ^ _mix64(self.key ^ _GAMMA))

    def copy(self) -> "RngStream":
        return RngStream(self.seed, self.key, self.counter)

    def _words(self, n: int) -> np.ndarray:
        c = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return _mix64_array(np.uint64(self._base) + c * np.uint64(_GAMMA))

    def uniform(self, shape) -> np.ndarray:
        """Float64 draws in [0, 1) using the top 53 bits of each word."""
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        out = (self._words(n) >> np.uint64(11)).astype(np.float64) * _INV53
        return out.reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """Standard normals via Box-Muller on uniform pairs.

        Consumes 2*ceil(n/2) counters, so the draw layout depends on call
        granularity; callers that need replay must repeat the call sequence.
        """
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[:m]))  # 1-u in (0,1], no log(0)
        theta = (2.0 * np.pi) * u[m:]
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return out.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of range(n) (argsort of random keys)."""
        return np.argsort(self.uniform(n), kind="stable")
