"""Dense float64 kernels and a reproducible random stream.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
The kernels here validate shapes and refuse to return non-finite values, so
a NaN anywhere in the barrier or QP math surfaces as :class:`NumericError`
instead of silently propagating.

The random stream is SplitMix64 (Steele, Lea & Flood 2014) evaluated in
counter mode, which makes it trivially vectorisable and bit-reproducible:

    state_i = seed + (i + 1) * 0x9E3779B97F4A7C15      (mod 2**64)
    z = (state_i ^ (state_i >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out_i = z ^ (z >> 31)

Uniforms take the top 53 bits, ``(out >> 11) * 2**-53``. Gaussians use the
Box-Muller transform on consecutive uniform pairs ``(u1, u2)``:
``sqrt(-2 ln(1 - u1)) * (cos(2 pi u2), sin(2 pi u2))``.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class NumericError(ArithmeticError):
    """A kernel produced or received a non-finite value."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op}: non-finite value in result")
    return out


def as_vector(x, name: str = "x") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-d, got shape {v.shape}")
    return v


def as_matrix(m, name: str = "M") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {a.shape}")
    return a


def matvec(m, x) -> np.ndarray:
    """Matrix-vector product ``m @ x``."""
    m = as_matrix(m)
    x = as_vector(x)
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: matrix is {m.shape}, vector has length {x.shape[0]}")
    return _check_finite(m @ x, "matvec")


def dot(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"dot: lengths {a.shape[0]} and {b.shape[0]} differ")
    out = float(a @ b)
    if not np.isfinite(out):
        raise NumericError("dot: non-finite result")
    return out


def softmax(v) -> np.ndarray:
    """Softmax with max subtraction; output is a point on the simplex."""
    v = as_vector(v, "v")
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    _check_finite(v, "softmax input")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax for 2-d (or batched) score arrays; -inf entries are masked."""
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gain) -> np.ndarray:
    """Bias-free layer norm: ``gain * (x - mean) / sqrt(var + 1e-5)``."""
    x = as_vector(x)
    gain = as_vector(gain, "gain")
    if gain.shape != x.shape:
        raise ShapeError(f"layer_norm: gain length {gain.shape[0]} != {x.shape[0]}")
    c = x - x.mean()
    return _check_finite(gain * (c / np.sqrt(c @ c / x.size + LN_EPS)), "layer_norm")


def layer_norm_rows(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """Row-wise :func:`layer_norm` for a ``(n, d)`` array."""
    c = x - x.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", c, c)[..., None] / x.shape[-1]
    return gain * (c / np.sqrt(var + LN_EPS))


def _splitmix(counters: np.ndarray, seed: int) -> np.ndarray:
    s = np.uint64(seed & _MASK64)
    z = s + counters * _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def mix_seed(seed: int, *keys: int) -> int:
    """Derive a child seed from ``seed`` and integer keys (stable across runs)."""
    out = seed & _MASK64
    for k in keys:
        out = int(_splitmix(np.array([1], dtype=np.uint64), out ^ (k & _MASK64))[0])
    return out


class Rng:
    """Single-owner deterministic stream; do not share one instance across tasks."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._counter = 0

    def spawn(self, *keys: int) -> "Rng":
        return Rng(mix_seed(self.seed, *keys))

    def next_u64(self, n: int) -> np.ndarray:
        counters = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _splitmix(counters, self.seed)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def gaussian(self, n: int) -> np.ndarray:
        if n <= 0:
            raise ValueError("gaussian: n must be positive")
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        radius = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        angle = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of ``range(n)`` (argsort of uniforms, stable)."""
        return np.argsort(self.uniform(n), kind="stable")


def seeded_gaussian(rng: Rng, n: int) -> np.ndarray:
    """Deterministic standard-normal draws from ``rng``."""
    return rng.gaussian(n)
