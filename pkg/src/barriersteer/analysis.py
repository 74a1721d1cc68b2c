"""Barrier binning with Wilson score intervals."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .trace import DecodeTrace


def wilson_interval(k: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for ``k`` successes in ``n`` trials."""
    if n <= 0:
        raise ValueError("wilson interval needs n >= 1")
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    p = k / n
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = (p + z2 / (2 * n)) / denom
    half = z / denom * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n))
    lo = 0.0 if k == 0 else max(0.0, min(p, centre - half))
    hi = 1.0 if k == n else min(1.0, max(p, centre + half))
    return lo, hi


@dataclass(frozen=True)
class Bin:
    index: int
    count: int
    hallucinated: int
    rate: float
    lo: float
    hi: float
    barrier_min: float
    barrier_max: float


@dataclass
class BinReport:
    bins: list[Bin]
    layer: int | None = None  # None: mean over steered layers

    def rates(self) -> list[float]:
        return [b.rate for b in self.bins]

    def to_rows(self) -> list[dict]:
        return [asdict(b) for b in self.bins]


def labelled_barriers(traces: Sequence[DecodeTrace], layer: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Barrier and hallucination flag for every labelled object token, in trace order."""
    h, y = [], []
    for tr in traces:
        for rec in tr.tokens:
            if not rec.is_object:
                continue
            if rec.hallucinated is None:
                raise ValueError(f"object token at step {rec.step} has no label")
            v = rec.barrier if layer is None else tr.layer_barrier(rec.step, layer)
            if v is None:
                raise ValueError("object token has no barrier; was the run traced with steered layers?")
            h.append(v)
            y.append(bool(rec.hallucinated))
    return np.asarray(h, dtype=np.float64), np.asarray(y, dtype=bool)


def bin_values(barriers: np.ndarray, labels: np.ndarray, n_bins: int = 9, z: float = 1.96) -> list[Bin]:
    barriers = np.asarray(barriers, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if barriers.shape != labels.shape:
        raise ValueError("barriers and labels differ in length")
    if barriers.size < n_bins:
        raise ValueError(f"need at least {n_bins} labelled object tokens, got {barriers.size}")
    order = np.argsort(barriers, kind="stable")  # ties keep trace order
    bins = []
    for i, idx in enumerate(np.array_split(order, n_bins)):
        k, n = int(labels[idx].sum()), len(idx)
        lo, hi = wilson_interval(k, n, z)
        bins.append(Bin(i, n, k, k / n, lo, hi, float(barriers[idx].min()), float(barriers[idx].max())))
    return bins


def bin_analysis(traces: Sequence[DecodeTrace], n_bins: int = 9, layer: int | None = None) -> BinReport:
    """Sort object tokens by barrier, cut into equal-count bins, rate each bin."""
    h, y = labelled_barriers(traces, layer)
    return BinReport(bin_values(h, y, n_bins), layer)


def intervals_disjoint(a: Bin, b: Bin) -> bool:
    return a.hi < b.lo or b.hi < a.lo
