"""Decode throughput and per-layer steering overhead.

Timing uses ``time.perf_counter`` (monotonic). Each configuration runs
``n_runs + 1`` generations; the first is a warm-up and is dropped. Each run
reports its median step time and the configuration's figure is the median
over runs, which keeps scheduler hiccups out of the estimate. Configurations
are interleaved run by run so slow drift in machine load hits them alike.

The layer-count regression uses the time spent inside the steering hook,
which is the steering overhead itself; whole-step differences are reported
alongside but at toy scale they sit inside the step-to-step jitter.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .decoder import Model, ModelConfig, decode_step, init_model, prefill, sample
from .numeric import Rng
from .steering import SteeringConfig, SteeringHook

OVERHEAD_LAYER_COUNTS = (2, 4, 8, 16)


class TimerResolutionError(RuntimeError):
    """The clock is too coarse to resolve a single decode step."""


@dataclass
class OverheadFit:
    counts: list[int]
    overhead: list[float]  # seconds per step spent inside the steering hook
    slope: float
    intercept: float
    r2: float
    wall_overhead: list[float] = field(default_factory=list)  # step time above the hook-free engine


@dataclass
class ThroughputReport:
    n_tokens: int
    n_runs: int
    step_unsteered: float  # median seconds per decode step
    step_steered: float
    tokens_per_s_unsteered: float
    tokens_per_s_steered: float
    ratio: float
    overhead: OverheadFit | None = None
    matvec_count: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_resolution(step_seconds: float) -> None:
    res = time.get_clock_info("perf_counter").resolution
    if step_seconds < 100 * res:
        raise TimerResolutionError(
            f"decode step of {step_seconds:.3g}s is within 100x of the clock resolution {res:.3g}s"
        )


class _TimedHook:
    """Wraps a steering hook and accumulates the time spent inside it."""

    def __init__(self, inner):
        self.inner = inner
        self.seconds = 0.0

    def __call__(self, layer, x):
        t0 = time.perf_counter()
        out = self.inner(layer, x)
        self.seconds += time.perf_counter() - t0
        return out


def _decode_times(
    model: Model, prompt, steering: SteeringConfig | None, n_tokens: int, time_hook: bool = False
) -> tuple[float, float]:
    """Median whole-step and in-hook seconds over one greedy decode.

    In-hook time is only measured with ``time_hook``; the wrapper's own clock
    reads would otherwise be charged to the steered configuration.
    """
    text, image = prompt
    cache, ctx, _ = prefill(model, text[:-1], image, steering.steered_layers if steering else ())
    steer = timer = None
    if steering is not None and steering.steered_layers:  # nothing to steer: no hook at all
        steer = SteeringHook.for_context(steering, ctx)
        timer = _TimedHook(steer) if time_hook else None
    hook = timer if timer is not None else steer
    x_in = model.embed[text[-1]]
    step_s, hook_s = [], []
    clock = time.perf_counter
    for step in range(n_tokens):
        if steer is not None:
            steer.step = step
        if timer is not None:
            timer.seconds = 0.0
        t0 = clock()
        tok = sample(decode_step(model, cache, x_in, hook))
        step_s.append(clock() - t0)
        hook_s.append(timer.seconds if timer is not None else 0.0)
        if tok == model.config.eos_id:
            break
        x_in = model.embed[tok]
    return float(np.median(step_s)), float(np.median(hook_s))


def time_configs(
    model: Model,
    prompt,
    configs: Sequence[SteeringConfig | None],
    n_tokens: int = 50,
    n_runs: int = 30,
    time_hooks: bool = False,
) -> tuple[list[float], list[float]]:
    """Median per-step seconds and in-hook seconds for each configuration.

    Runs are interleaved across configurations and the warm-up run is dropped.
    In-hook seconds are zero unless ``time_hooks`` is set.
    """
    if n_runs < 1 or n_tokens < 1:
        raise ValueError("n_runs and n_tokens must be positive")
    steps = [[] for _ in configs]
    hooks = [[] for _ in configs]
    for run in range(n_runs + 1):
        for i, cfg in enumerate(configs):
            st, ht = _decode_times(model, prompt, cfg, n_tokens, time_hooks)
            if run > 0:
                steps[i].append(st)
                hooks[i].append(ht)
    step_med = [float(np.median(s)) for s in steps]
    _check_resolution(min(step_med))
    return step_med, [float(np.median(h)) for h in hooks]


def linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line; returns ``(slope, intercept, r2)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 0.0
    return float(slope), float(intercept), r2


def random_prompt(config: ModelConfig, n_image: int = 8, seed: int = 0):
    """A BOS/image/text prompt for a random model (token ids 0 and 1)."""
    rng = Rng(seed).spawn(0xBE7C)
    image = rng.gaussian(n_image * config.d_model).reshape(n_image, config.d_model)
    return (0, 1), image


def overhead_scaling(
    config: ModelConfig | None = None,
    counts: Sequence[int] = OVERHEAD_LAYER_COUNTS,
    n_tokens: int = 50,
    n_runs: int = 30,
    mode: str = "continuous",
) -> OverheadFit:
    """Per-step steering overhead against the number of steered layers.

    ``continuous`` mode is the default so every steered layer does the full
    correction on every step; the gated mode's cost depends on how often
    its gate opens, which would blur the layer-count dependence.
    """
    if config is None:
        config = ModelConfig(n_layers=max(counts), n_heads=4, d_model=64, vocab_size=64, max_seq=128)
    if max(counts) > config.n_layers:
        raise ValueError("more steered layers requested than the model has")
    model = init_model(config)
    prompt = random_prompt(config)
    configs: list[SteeringConfig | None] = [None]
    for k in counts:
        configs.append(SteeringConfig(tau=0.0, steered_layers=tuple(range(k)), mode=mode))
    steps, hooks = time_configs(model, prompt, configs, n_tokens, n_runs, time_hooks=True)
    overhead = hooks[1:]
    slope, intercept, r2 = linear_fit(counts, overhead)
    return OverheadFit(list(counts), overhead, slope, intercept, r2, [t - steps[0] for t in steps[1:]])


def throughput_bench(
    model: Model,
    prompt,
    steering: SteeringConfig,
    n_tokens: int = 50,
    n_runs: int = 30,
    baseline: SteeringConfig | None = None,
    scaling: bool = False,
) -> ThroughputReport:
    """Steered against unsteered decode throughput on one prompt.

    ``baseline=None`` compares against the hook-free engine. ``prompt`` is a
    ``(text_tokens, image_embeddings)`` pair.
    """
    (base_t, steer_t), _ = time_configs(model, prompt, [baseline, steering], n_tokens, n_runs)
    report = ThroughputReport(
        n_tokens=n_tokens,
        n_runs=n_runs,
        step_unsteered=base_t,
        step_steered=steer_t,
        tokens_per_s_unsteered=1.0 / base_t,
        tokens_per_s_steered=1.0 / steer_t,
        ratio=base_t / steer_t,
        matvec_count=complexity_counts(model.config, steering),
    )
    if scaling:
        report.overhead = overhead_scaling(n_tokens=n_tokens, n_runs=n_runs)
    return report


def complexity_counts(config: ModelConfig, steering: SteeringConfig) -> dict:
    """Per-step operation counts for the steering path.

    The reference accounting charges one d-by-d matrix-vector product per
    steered layer for the barrier; with the gradient folded at prefill this
    implementation pays one length-d dot product instead, plus one axpy when
    the gate opens.
    """
    k = len(steering.steered_layers) if steering.mode != "off" else 0
    d = config.d_model
    return {
        "steered_layers": k,
        "reference_matvec_flops": 2 * d * d * k,
        "barrier_dot_flops": 2 * d * k,
        "correction_axpy_flops": 2 * d * k,
        "prefill_gradient_flops": 2 * config.n_heads * config.d_head * d * k,
    }
