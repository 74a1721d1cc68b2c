"""Minimum-norm barrier correction and the decode-time steering hook.

For a steered layer with barrier ``h = g . x`` and threshold ``tau`` the
correction solves

    min 1/2 |theta|^2   s.t.   g . theta >= tau - h

Stationarity of the Lagrangian gives ``theta = lam * g``; if ``h >= tau`` the
constraint is slack and ``lam = 0``, otherwise it is tight and
``lam = (tau - h) / |g|^2``. With a small floor ``eps`` in the denominator
both cases read

    theta* = (tau - h)_+ / (|g|^2 + eps) * g

Modes:

* ``off``        observe ``h`` only
* ``regulated``  apply ``alpha * theta*`` (the gated rule above)
* ``continuous`` drop the positive part: ``(tau - h) / (|g|^2 + eps) * g`` every step
* ``q_only``     solve the same constraint in query space and add the result to
                 the queries only, leaving the cached keys and values untouched
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .barrier import BarrierGradient
from .numeric import ShapeError
from .trace import StepTrace

MODES = ("off", "regulated", "continuous", "q_only")


class InfeasibleDirection(ValueError):
    """The constraint is violated but the gradient is zero, so no step can restore it."""


@dataclass(frozen=True)
class SteeringConfig:
    tau: float = 0.0
    alpha: float = 1.0
    epsilon: float = 1e-6
    steered_layers: tuple[int, ...] = ()
    mode: str = "regulated"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown steering mode {self.mode!r}; expected one of {MODES}")
        if self.mode != "off" and not self.alpha > 0:
            raise ValueError("alpha must be positive when steering is on")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if not math.isfinite(self.tau):
            raise ValueError("tau must be finite")
        object.__setattr__(self, "steered_layers", tuple(sorted(set(int(l) for l in self.steered_layers))))

    def with_(self, **changes) -> "SteeringConfig":
        return replace(self, **changes)

    def check_layers(self, n_layers: int) -> None:
        for l in self.steered_layers:
            if not 0 <= l < n_layers:
                raise ValueError(f"steered layer {l} outside [0, {n_layers})")


@dataclass(frozen=True)
class Correction:
    theta: np.ndarray
    violation: float
    fired: bool
    lam: float


def solve_correction(h: float, g: BarrierGradient, tau: float, epsilon: float = 1e-6) -> Correction:
    """Closed-form minimiser of the single-constraint QP (with floor ``epsilon``).

    ``epsilon = 0`` is accepted for exactness checks; a zero gradient then
    yields ``theta = 0``.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    violation = max(tau - h, 0.0)
    if violation == 0.0:
        return Correction(theta=np.zeros_like(g.vector), violation=0.0, fired=False, lam=0.0)
    denom = g.norm_sq + epsilon
    lam = violation / denom if denom > 0 else 0.0
    return Correction(theta=lam * g.vector, violation=violation, fired=True, lam=lam)


def continuous_correction(h: float, g: BarrierGradient, tau: float, epsilon: float = 1e-6) -> Correction:
    """Ungated variant: always moves ``h`` toward ``tau``, downward if ``h > tau``."""
    denom = g.norm_sq + epsilon
    lam = (tau - h) / denom
    return Correction(theta=lam * g.vector, violation=max(tau - h, 0.0), fired=True, lam=lam)


def qp_oracle(h: float, g, tau: float) -> np.ndarray:
    """Euclidean projection of the origin onto ``{theta : g . theta >= tau - h}``.

    Built from the projection formula for a halfspace ``{a . y >= b}``:
    the closest point to ``y0`` is ``y0 + max(b - a . y0, 0) a / |a|^2``,
    evaluated at ``y0 = 0`` with no floor.
    """
    a = np.asarray(getattr(g, "vector", g), dtype=np.float64)
    b = tau - h
    if b <= 0:
        return np.zeros_like(a)
    nrm2 = float(np.dot(a, a))
    if nrm2 == 0.0:
        raise InfeasibleDirection("barrier is below threshold but its gradient is zero")
    return (b / nrm2) * a


def qp_projected_gradient(
    h: float, g, tau: float, start: np.ndarray | None = None, iters: int = 10_000, step: float = 0.01
) -> np.ndarray:
    """Iterative route to the same minimiser: gradient steps on |theta|^2/2, projected onto the halfspace."""
    a = np.asarray(getattr(g, "vector", g), dtype=np.float64)
    b = tau - h
    nrm2 = float(a @ a)
    if b > 0 and nrm2 == 0.0:
        raise InfeasibleDirection("barrier is below threshold but its gradient is zero")
    theta = np.ones_like(a) if start is None else np.array(start, dtype=np.float64)
    for _ in range(iters):
        theta = theta - step * theta
        gap = b - a @ theta
        if gap > 0:
            theta = theta + gap / nrm2 * a
    return theta


def apply_steering(x: np.ndarray, c: Correction, alpha: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if c.theta.shape != x.shape:
        raise ShapeError(f"correction has shape {c.theta.shape}, input has {x.shape}")
    if not c.fired or alpha == 0:
        return x
    return x + alpha * c.theta


def query_gradients(key_sums: np.ndarray, n_image: int) -> np.ndarray:
    """Gradient of the barrier with respect to each head's query, ``(H, d_m)``."""
    h, dm = key_sums.shape
    return key_sums / (h * n_image * math.sqrt(dm))


def q_only_correction(h: float, q_grads: np.ndarray, tau: float, epsilon: float = 1e-6) -> np.ndarray:
    """Minimum-norm per-head query update restoring ``h >= tau``."""
    violation = max(tau - h, 0.0)
    if violation == 0.0:
        return np.zeros_like(q_grads)
    denom = float(np.sum(q_grads * q_grads)) + epsilon
    return (violation / denom if denom > 0 else 0.0) * q_grads


def steering_hook(
    mode: str,
    config: SteeringConfig,
    g: BarrierGradient,
    x: np.ndarray,
    q_grads: np.ndarray | None = None,
    step: int = -1,
    record_state: bool = False,
) -> tuple[np.ndarray, np.ndarray | None, StepTrace]:
    """One steering decision at one layer. Returns ``(x~, query_delta, trace)``."""
    h = float(g.vector @ x)
    dq = None
    if mode == "off":
        entry = StepTrace(step, g.layer, h, False, 0.0, 0.0)
        x_out = x
    elif mode == "regulated":
        c = solve_correction(h, g, config.tau, config.epsilon)
        x_out = apply_steering(x, c, config.alpha)
        entry = StepTrace(step, g.layer, h, c.fired, abs(c.lam) * math.sqrt(g.norm_sq), c.violation)
    elif mode == "continuous":
        c = continuous_correction(h, g, config.tau, config.epsilon)
        x_out = x + config.alpha * c.theta
        entry = StepTrace(step, g.layer, h, True, abs(c.lam) * math.sqrt(g.norm_sq), c.violation)
    elif mode == "q_only":
        if q_grads is None:
            raise ValueError("q_only steering needs per-head query gradients")
        violation = max(config.tau - h, 0.0)
        x_out = x
        if violation > 0:
            theta_q = q_only_correction(h, q_grads, config.tau, config.epsilon)
            dq = config.alpha * theta_q
            entry = StepTrace(step, g.layer, h, True, float(np.sqrt(np.sum(theta_q * theta_q))), violation)
        else:
            entry = StepTrace(step, g.layer, h, False, 0.0, 0.0)
    else:
        raise ValueError(f"unknown steering mode {mode!r}")
    if record_state:
        entry.x_steered = x_out.copy()
        entry.q_delta = None if dq is None else dq.copy()
    return x_out, dq, entry


@dataclass
class SteeringHook:
    """Decode-time hook bound to one prompt's prefill context."""

    config: SteeringConfig
    gradients: dict[int, BarrierGradient]
    q_grads: dict[int, np.ndarray] = field(default_factory=dict)
    record_states: bool = False
    step: int = 0
    entries: list[StepTrace] = field(default_factory=list)

    @classmethod
    def for_context(cls, config: SteeringConfig, ctx, record_states: bool = False) -> "SteeringHook":
        q_grads = {}
        if config.mode == "q_only":
            q_grads = {l: query_gradients(ctx.key_sums[l], ctx.n_image) for l in config.steered_layers}
        return cls(config=config, gradients=ctx.gradients, q_grads=q_grads, record_states=record_states)

    def __call__(self, layer: int, x: np.ndarray):
        g = self.gradients.get(layer)
        if g is None:
            return x, None
        x_out, dq, entry = steering_hook(
            self.config.mode, self.config, g, x, self.q_grads.get(layer), self.step, self.record_states
        )
        self.entries.append(entry)
        return x_out, dq
