"""Per-step records emitted during generation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class StepTrace:
    step: int
    layer: int
    h: float
    fired: bool
    theta_norm: float
    violation: float
    x_steered: np.ndarray | None = None
    q_delta: np.ndarray | None = None


@dataclass
class TokenRecord:
    step: int
    token: int
    barrier: float | None  # mean pre-steer h over steered layers at the producing position
    is_object: bool = False
    hallucinated: bool | None = None
    seconds: float = 0.0


@dataclass
class DecodeTrace:
    entries: list[StepTrace] = field(default_factory=list)
    tokens: list[TokenRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def object_tokens(self) -> list[TokenRecord]:
        return [t for t in self.tokens if t.is_object]

    def layer_barrier(self, step: int, layer: int) -> float | None:
        for e in self.entries:
            if e.step == step and e.layer == layer:
                return e.h
        return None
