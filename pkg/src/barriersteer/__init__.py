"""Barrier-gated closed-form attention steering for a toy multimodal decoder."""

from .barrier import BarrierGradient, aggregate_image_keys, barrier_direct, barrier_gradient, barrier_value
from .decoder import (
    Greedy,
    KVCache,
    Model,
    ModelConfig,
    TopP,
    decode_step,
    generate,
    init_model,
    prefill,
    sample,
)
from .steering import Correction, SteeringConfig, apply_steering, qp_oracle, solve_correction

__version__ = "0.1.0"
