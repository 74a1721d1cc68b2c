"""End-to-end runs on the synthetic task: labels, metrics, calibration, sweeps."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .decoder import Greedy, Model, TopP, generate
from .numeric import mix_seed
from .steering import SteeringConfig
from .task import Prompt, SyntheticTask
from .trace import DecodeTrace

CALIBRATION_STREAM = 0xCA11B


@dataclass
class PromptResult:
    prompt: Prompt
    tokens: list[int]
    trace: DecodeTrace


@dataclass
class Summary:
    hallucination_rate: float | None
    object_recall: float | None
    mean_fired_fraction: float
    n_prompts: int
    n_object_tokens: int
    n_hallucinated: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentResult:
    steering: SteeringConfig
    results: list[PromptResult]
    summary: Summary

    @property
    def traces(self) -> list[DecodeTrace]:
        return [r.trace for r in self.results]


def label_trace(trace: DecodeTrace, task: SyntheticTask, objects: Iterable[int]) -> DecodeTrace:
    """Mark object tokens and their hallucination flag in place."""
    present = set(objects)
    for rec in trace.tokens:
        rec.is_object = task.is_object(rec.token)
        rec.hallucinated = (rec.token not in present) if rec.is_object else None
    return trace


def hallucination_rate(traces: Sequence[DecodeTrace]) -> float | None:
    """Hallucinated object tokens over all object tokens; ``None`` when there are none."""
    n = k = 0
    for tr in traces:
        for rec in tr.tokens:
            if rec.is_object:
                if rec.hallucinated is None:
                    raise ValueError(f"object token at step {rec.step} has no label")
                n += 1
                k += bool(rec.hallucinated)
    return k / n if n else None


def object_recall(results: Sequence[PromptResult]) -> float | None:
    """Instance-level recall: mean over prompts of the share of present objects named."""
    if not results:
        return None
    per_prompt = []
    for r in results:
        present = set(r.prompt.objects)
        named = present.intersection(r.tokens)
        per_prompt.append(len(named) / len(present))
    return float(np.mean(per_prompt))


def fired_fraction(traces: Sequence[DecodeTrace]) -> float:
    n = sum(len(t.entries) for t in traces)
    if n == 0:
        return 0.0
    return sum(e.fired for t in traces for e in t.entries) / n


def selectivity_stats(traces: Sequence[DecodeTrace]) -> dict:
    """How often and where the gate opens.

    Returns the mean number of fired layers per decode step, the overall
    fired fraction over (step, layer) pairs, and per-layer firing rates.
    """
    entries = [e for t in traces for e in t.entries]
    if not entries:
        raise ValueError("no trace entries to summarise")
    per_layer: dict[int, list[int]] = {}
    per_step: dict[tuple[int, int], int] = {}
    for ti, t in enumerate(traces):
        for e in t.entries:
            per_layer.setdefault(e.layer, [0, 0])
            per_layer[e.layer][0] += e.fired
            per_layer[e.layer][1] += 1
            per_step[(ti, e.step)] = per_step.get((ti, e.step), 0) + e.fired
    return {
        "mean_fired_layers_per_step": float(np.mean(list(per_step.values()))),
        "fired_fraction": sum(e.fired for e in entries) / len(entries),
        "per_layer": {l: f / n for l, (f, n) in sorted(per_layer.items())},
    }


def run_experiment(
    task: SyntheticTask,
    model: Model,
    steering: SteeringConfig,
    n_prompts: int = 500,
    policy: Greedy | TopP = Greedy(),
    prompt_seed: int | None = None,
    max_new: int | None = None,
) -> ExperimentResult:
    """Caption ``n_prompts`` prompts under one steering configuration."""
    if n_prompts < 1:
        raise ValueError("n_prompts must be at least 1")
    steering.check_layers(model.config.n_layers)
    if max_new is None:
        max_new = task.config.caption_len + 4
    results = []
    for i in range(n_prompts):
        p = task.prompt(i, prompt_seed)
        gen = generate(model, p.text, p.image, steering, max_new=max_new, policy=policy, image_at=p.image_at)
        label_trace(gen.trace, task, p.objects)
        results.append(PromptResult(p, gen.tokens, gen.trace))
    traces = [r.trace for r in results]
    objs = [rec for t in traces for rec in t.tokens if rec.is_object]
    summary = Summary(
        hallucination_rate=hallucination_rate(traces),
        object_recall=object_recall(results),
        mean_fired_fraction=fired_fraction(traces),
        n_prompts=n_prompts,
        n_object_tokens=len(objs),
        n_hallucinated=sum(bool(r.hallucinated) for r in objs),
    )
    return ExperimentResult(steering, results, summary)


def prefill_barriers(
    task: SyntheticTask, model: Model, layers: Sequence[int], n_prompts: int = 32, seed: int | None = None
) -> np.ndarray:
    """Barrier at the last prompt position for each calibration prompt and layer."""
    if seed is None:
        seed = mix_seed(task.config.seed, CALIBRATION_STREAM)
    probe = SteeringConfig(mode="off", steered_layers=tuple(layers))
    out = []
    for i in range(n_prompts):
        p = task.prompt(i, seed)
        gen = generate(model, p.text, p.image, probe, max_new=1, image_at=p.image_at)
        out.extend(e.h for e in gen.trace.entries)
    return np.asarray(out)


def calibrate_tau(
    task: SyntheticTask,
    model: Model,
    layers: Sequence[int],
    n_prompts: int = 32,
    percentile: float = 30.0,
    seed: int | None = None,
) -> float:
    """Default threshold: a low percentile of prefill-step barriers on a held-out batch."""
    if not layers:
        raise ValueError("calibration needs at least one steered layer")
    return float(np.percentile(prefill_barriers(task, model, layers, n_prompts, seed), percentile))


# -- sweeps -------------------------------------------------------------------

ALPHA_GRID = (0.3, 0.5, 1.0, 1.25, 1.5)
TAU_OFFSETS = (-0.6, -0.3, 0.0, 0.3, 0.6)
LOWER_LAYER_GRID = (0, 1, 2, 3)


@dataclass
class AblationGrids:
    alpha: tuple[float, ...] = ALPHA_GRID
    tau: tuple[float, ...] | None = None  # absolute values; None means calibrated tau + TAU_OFFSETS
    lower_layer: tuple[int, ...] = LOWER_LAYER_GRID
    injection: bool = True  # x vs q
    gating: bool = True  # regulated vs continuous vs off


def _row(sweep: str, value, res: ExperimentResult) -> dict:
    s = res.summary
    return {
        "sweep": sweep,
        "value": value,
        "mode": res.steering.mode,
        "tau": res.steering.tau,
        "alpha": res.steering.alpha,
        "layers": "-".join(str(l) for l in res.steering.steered_layers),
        "hallucination_rate": s.hallucination_rate,
        "object_recall": s.object_recall,
        "fired_fraction": s.mean_fired_fraction,
        "n_object_tokens": s.n_object_tokens,
    }


def ablation_suite(
    task: SyntheticTask,
    model: Model,
    base: SteeringConfig,
    grids: AblationGrids = AblationGrids(),
    n_prompts: int = 200,
    prompt_seed: int | None = None,
) -> dict[str, list[dict]]:
    """One-at-a-time sweeps around ``base``. Returns table name -> rows in grid order."""
    top = max(base.steered_layers) if base.steered_layers else model.config.n_layers - 1

    def run(cfg):
        return run_experiment(task, model, cfg, n_prompts, prompt_seed=prompt_seed)

    tables: dict[str, list[dict]] = {}
    if grids.alpha:
        tables["alpha"] = [_row("alpha", a, run(base.with_(alpha=a))) for a in grids.alpha]
    taus = grids.tau if grids.tau is not None else tuple(base.tau + o for o in TAU_OFFSETS)
    if taus:
        tables["tau"] = [_row("tau", t, run(base.with_(tau=t))) for t in taus]
    if grids.lower_layer:
        rows = []
        for lo in grids.lower_layer:
            if lo > top:
                raise ValueError(f"lower layer {lo} above the top steered layer {top}")
            rows.append(_row("lower_layer", lo, run(base.with_(steered_layers=tuple(range(lo, top + 1))))))
        tables["lower_layer"] = rows
    if grids.injection:
        tables["injection"] = [
            _row("injection", "x", run(base.with_(mode="regulated"))),
            _row("injection", "q", run(base.with_(mode="q_only"))),
        ]
    if grids.gating:
        tables["gating"] = [
            _row("gating", m, run(base.with_(mode=m))) for m in ("off", "regulated", "continuous")
        ]
    return tables
