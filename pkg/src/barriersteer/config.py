"""Run configuration: one JSON document with model, task, steering and experiment sections.

Every field has a default, so ``{}`` is a valid config. Unknown sections or
fields raise :class:`ConfigError`, which catches typos such as ``"tua"``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .decoder import ModelConfig
from .steering import MODES, SteeringConfig
from .task import TaskConfig


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class ModelSection:
    n_layers: int = 6
    n_heads: int = 4
    d_model: int = 64
    d_ff: int | None = None
    max_seq: int | None = None  # None: sized to the task
    seed: int | None = None  # None: the task seed


@dataclass(frozen=True)
class SteeringSection:
    tau: float | None = None  # None: calibrated on held-out prompts
    alpha: float = 1.0
    epsilon: float = 1e-6
    steered_layers: tuple[int, ...] = (2, 3, 4)
    mode: str = "regulated"


@dataclass(frozen=True)
class ExperimentSection:
    n_prompts: int = 500
    prompt_seed: int | None = None
    max_new: int | None = None
    policy: str = "greedy"
    top_p: float = 0.95
    temperature: float = 1.0
    sample_seed: int = 0
    calibration_prompts: int = 32
    calibration_percentile: float = 30.0
    n_bins: int = 9
    bin_layer: int | None = None
    alpha_grid: tuple[float, ...] = (0.3, 0.5, 1.0, 1.25, 1.5)
    tau_grid: tuple[float, ...] | None = None
    lower_layer_grid: tuple[int, ...] = (0, 1, 2, 3)
    ablation_prompts: int = 200
    bench_tokens: int = 50
    bench_runs: int = 30


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    task: TaskConfig = field(default_factory=TaskConfig)
    steering: SteeringSection = field(default_factory=SteeringSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def model_config(self) -> ModelConfig:
        t, m = self.task, self.model
        try:
            return ModelConfig(
                n_layers=m.n_layers,
                n_heads=m.n_heads,
                d_model=m.d_model,
                vocab_size=t.n_objects + 3,
                max_seq=m.max_seq if m.max_seq is not None else t.n_present + 2 + t.caption_len + 8,
                seed=m.seed if m.seed is not None else t.seed,
                d_ff=m.d_ff,
                eos_id=t.n_objects + 2,
            )
        except ValueError as e:
            raise ConfigError(f"model: {e}") from e

    def steering_config(self, tau: float) -> SteeringConfig:
        s = self.steering
        try:
            cfg = SteeringConfig(tau=tau, alpha=s.alpha, epsilon=s.epsilon, steered_layers=s.steered_layers, mode=s.mode)
            cfg.check_layers(self.model.n_layers)
        except ValueError as e:
            raise ConfigError(f"steering: {e}") from e
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.to_dict()
        return json.loads(json.dumps(d))  # tuples to lists


def _build(cls, section: str, raw: Any):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from e


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    sections = {"model": ModelSection, "task": TaskConfig, "steering": SteeringSection, "experiment": ExperimentSection}
    unknown = sorted(set(doc) - set(sections))
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    built = {name: _build(cls, name, doc.get(name)) for name, cls in sections.items()}
    cfg = RunConfig(**built)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    s, e = cfg.steering, cfg.experiment
    if s.mode not in MODES:
        raise ConfigError(f"steering: unknown mode {s.mode!r}")
    if e.policy not in ("greedy", "top_p"):
        raise ConfigError(f"experiment: policy must be 'greedy' or 'top_p', got {e.policy!r}")
    if e.n_prompts < 1 or e.calibration_prompts < 1 or e.ablation_prompts < 1:
        raise ConfigError("experiment: prompt counts must be positive")
    if not 0 <= e.calibration_percentile <= 100:
        raise ConfigError("experiment: calibration_percentile must lie in [0, 100]")
    if e.n_bins < 1:
        raise ConfigError("experiment: n_bins must be positive")
    cfg.model_config()
    cfg.steering_config(0.0 if s.tau is None else s.tau)


def load_config(path: str | Path | None) -> RunConfig:
    """Read a run config; ``None`` gives all defaults."""
    if path is None:
        return config_from_dict({})
    text = Path(path).read_text()  # OSError propagates: an I/O failure, not a config error
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return config_from_dict(doc)
