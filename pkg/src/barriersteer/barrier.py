"""Image-attention grounding barrier and its closed-form gradient.

The barrier at a layer is the mean pre-softmax score from the current query
to every cached image key, averaged over heads::

    h(x) = 1/(H |I|) * sum_m sum_{j in I} <W_Q^m x, k_m(j)> / sqrt(d_m)

It is linear in ``x``. Pulling the image-key sum out of the inner loop gives
``h(x) = g . x`` with a gradient that is constant for the whole prompt::

    g = 1/(H |I| sqrt(d_m)) * sum_m (W_Q^m)^T S_m,   S_m = sum_{j in I} k_m(j)

so once ``g`` is built at prefill each decode step costs one length-d dot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numeric import NumericError, ShapeError


@dataclass(frozen=True)
class BarrierGradient:
    vector: np.ndarray
    norm_sq: float
    layer: int = -1
    offset: float = 0.0  # reserved for backbones with a query bias

    @classmethod
    def from_vector(cls, g: np.ndarray, layer: int = -1) -> "BarrierGradient":
        g = np.asarray(g, dtype=np.float64)
        return cls(vector=g, norm_sq=float(g @ g), layer=layer)


@dataclass(frozen=True)
class BarrierValue:
    h: float
    layer: int = -1
    step: int = -1


def aggregate_image_keys(cache, image_positions: Sequence[int], layer: int) -> np.ndarray:
    """Per-head sum of cached image keys, accumulated in index order.

    Returns an ``(H, d_m)`` array.
    """
    keys = cache.keys(layer)
    n = keys.shape[1]
    if len(image_positions) == 0:
        raise ValueError("no image positions to aggregate")
    total = np.zeros((keys.shape[0], keys.shape[2]))
    for j in image_positions:
        if not 0 <= j < n:
            raise IndexError(f"image position {j} outside cache of length {n}")
        total = total + keys[:, j, :]
    return total


def barrier_gradient(weights, key_sums: np.ndarray, n_image: int, layer: int = -1) -> BarrierGradient:
    """Closed-form gradient of the barrier from ``W_Q`` and the image-key sums."""
    if n_image <= 0:
        raise ValueError("barrier gradient needs at least one image token")
    w_q = weights.w_q
    h, dm, d = w_q.shape
    if key_sums.shape != (h, dm):
        raise ShapeError(f"key sums have shape {key_sums.shape}, expected {(h, dm)}")
    g = w_q.reshape(h * dm, d).T @ key_sums.reshape(h * dm)
    g = g / (h * n_image * math.sqrt(dm))
    if not np.all(np.isfinite(g)):
        raise NumericError("barrier gradient is not finite")
    return BarrierGradient.from_vector(g, layer=layer)


def barrier_value(g: BarrierGradient, x: np.ndarray, step: int = -1) -> BarrierValue:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != g.vector.shape:
        raise ShapeError(f"x has shape {x.shape}, gradient has {g.vector.shape}")
    return BarrierValue(h=float(g.vector @ x) + g.offset, layer=g.layer, step=step)


def barrier_direct(x: np.ndarray, weights, cache, image_positions: Sequence[int], layer: int) -> float:
    """Literal double sum over heads and image tokens (oracle path)."""
    x = np.asarray(x, dtype=np.float64)
    w_q = weights.w_q
    h, dm, d = w_q.shape
    if x.shape != (d,):
        raise ShapeError(f"x has shape {x.shape}, expected ({d},)")
    if len(image_positions) == 0:
        raise ValueError("barrier needs at least one image token")
    keys = cache.keys(layer)
    total = 0.0
    for m in range(h):
        q = w_q[m] @ x
        for j in image_positions:
            total += float(q @ keys[m, j]) / math.sqrt(dm)
    return total / (h * len(image_positions))
