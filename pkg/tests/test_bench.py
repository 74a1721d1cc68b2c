import time

import pytest

from barriersteer import bench
from barriersteer.bench import (
    TimerResolutionError,
    complexity_counts,
    linear_fit,
    overhead_scaling,
    throughput_bench,
)
from barriersteer.decoder import ModelConfig
from barriersteer.steering import SteeringConfig


def test_linear_fit_exact():
    slope, intercept, r2 = linear_fit([2, 4, 8, 16], [5.0, 9.0, 17.0, 33.0])
    assert slope == pytest.approx(2.0) and intercept == pytest.approx(1.0) and r2 == pytest.approx(1.0)


def test_complexity_counts():
    cfg = ModelConfig(d_model=64, n_heads=4)
    c = complexity_counts(cfg, SteeringConfig(steered_layers=(1, 2, 3)))
    assert c["steered_layers"] == 3
    assert c["reference_matvec_flops"] == 3 * 2 * 64 * 64
    assert c["barrier_dot_flops"] == 3 * 2 * 64
    assert complexity_counts(cfg, SteeringConfig(mode="off", steered_layers=(1,)))["steered_layers"] == 0


@pytest.fixture(scope="module")
def prompt(default_task):
    task, _ = default_task
    p = task.prompt(0)
    return p.text, p.image


def test_self_comparison(default_task, prompt):
    _, model = default_task
    off = SteeringConfig(mode="off", steered_layers=(2, 3, 4))
    rep = throughput_bench(model, prompt, off, n_tokens=13, n_runs=25, baseline=off)
    assert abs(rep.ratio - 1.0) <= 0.05
    assert 0 < rep.ratio <= 1.05 or abs(rep.ratio - 1.0) <= 0.05


def test_empty_steering_set(default_task, prompt):
    _, model = default_task
    rep = throughput_bench(model, prompt, SteeringConfig(tau=0.0, steered_layers=()), n_tokens=13, n_runs=25)
    assert rep.ratio == pytest.approx(1.0, abs=0.1)
    assert rep.matvec_count["steered_layers"] == 0


def test_overhead_fields():
    cfg = ModelConfig(n_layers=4, n_heads=2, d_model=16, vocab_size=8, max_seq=32)
    fit = overhead_scaling(cfg, counts=(1, 2, 4), n_tokens=4, n_runs=2)
    assert fit.counts == [1, 2, 4] and len(fit.overhead) == 3 and len(fit.wall_overhead) == 3
    with pytest.raises(ValueError):
        overhead_scaling(cfg, counts=(8,), n_tokens=2, n_runs=1)


def test_timer_resolution(monkeypatch, default_task, prompt):
    _, model = default_task

    class Coarse:
        resolution = 1.0

    monkeypatch.setattr(bench.time, "get_clock_info", lambda name: Coarse())
    with pytest.raises(TimerResolutionError):
        throughput_bench(model, prompt, SteeringConfig(tau=0.0, steered_layers=(2,)), n_tokens=3, n_runs=1)


def test_bad_counts(default_task, prompt):
    _, model = default_task
    with pytest.raises(ValueError):
        throughput_bench(model, prompt, SteeringConfig(tau=0.0, steered_layers=(2,)), n_tokens=0)
