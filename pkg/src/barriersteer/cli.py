"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numeric failure (NaN or a
failed self-test), 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .analysis import bin_analysis
from .bench import overhead_scaling, throughput_bench
from .config import ConfigError, RunConfig, load_config
from .decoder import Greedy, TopP
from .experiment import AblationGrids, ablation_suite, calibrate_tau, run_experiment, selectivity_stats
from .numeric import NumericError, Rng
from .reports import ReportStatus, emit_reports, read_traces
from .selftest import run_selftest
from .task import build_synthetic_task

log = logging.getLogger("barriersteer")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


def _setup(cfg: RunConfig):
    try:
        task, model = build_synthetic_task(cfg.task, cfg.model_config())
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"task: {e}") from e
    tau = cfg.steering.tau
    if tau is None:
        layers = cfg.steering.steered_layers
        if not layers:
            raise ConfigError("steering: tau calibration needs steered layers")
        e = cfg.experiment
        tau = calibrate_tau(task, model, layers, e.calibration_prompts, e.calibration_percentile)
        log.info("calibrated tau = %.6g", tau)
    return task, model, cfg.steering_config(tau)


def _policy(cfg: RunConfig):
    e = cfg.experiment
    if e.policy == "greedy":
        return Greedy()
    return TopP(p=e.top_p, temperature=e.temperature, rng=Rng(e.sample_seed))


def _written(res, out) -> int:
    if res.status is ReportStatus.EMPTY:
        print(f"nothing to write to {out}")
    else:
        for p in res.paths:
            print(f"wrote {p}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    return EXIT_OK if run_selftest() else EXIT_NUMERIC


def cmd_decode(args) -> int:
    cfg = load_config(args.config)
    task, model, steering = _setup(cfg)
    from .decoder import generate
    from .experiment import label_trace

    p = task.prompt(args.index, cfg.experiment.prompt_seed)
    max_new = cfg.experiment.max_new or task.config.caption_len + 4
    gen = generate(model, p.text, p.image, steering, max_new=max_new, policy=_policy(cfg), image_at=p.image_at)
    label_trace(gen.trace, task, p.objects)
    print(f"objects in image: {sorted(p.objects)}  brightness {p.brightness:.3f}  tau {steering.tau:.4g}")
    for rec in gen.trace.tokens:
        entries = [e for e in gen.trace.entries if e.step == rec.step]
        fired = sum(e.fired for e in entries)
        tag = "-" if not rec.is_object else ("HALLUCINATED" if rec.hallucinated else "ok")
        bar = "n/a" if rec.barrier is None else f"{rec.barrier:8.4f}"
        print(f"step {rec.step:3d}  token {rec.token:3d}  h {bar}  fired {fired}/{len(entries)}  {tag}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    task, model, steering = _setup(cfg)
    e = cfg.experiment
    res = run_experiment(task, model, steering, e.n_prompts, _policy(cfg), e.prompt_seed, e.max_new)
    summary = {"config": cfg.to_dict(), "tau": steering.tau, "steered": res.summary.to_dict()}
    if res.traces and any(t.entries for t in res.traces):
        summary["selectivity"] = selectivity_stats(res.traces)
    if steering.mode != "off":
        base = run_experiment(task, model, steering.with_(mode="off"), e.n_prompts, _policy(cfg), e.prompt_seed, e.max_new)
        summary["unsteered"] = base.summary.to_dict()
    bins = None
    n_obj = res.summary.n_object_tokens
    if steering.steered_layers and n_obj >= e.n_bins:
        bins = bin_analysis(res.traces, e.n_bins, e.bin_layer)
    print(json.dumps({k: summary[k] for k in summary if k != "config"}, indent=2))
    return _written(emit_reports(args.out, summary=summary, traces=res.traces, bins=bins), args.out)


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    task, model, steering = _setup(cfg)
    e = cfg.experiment
    grids = AblationGrids(alpha=e.alpha_grid, tau=e.tau_grid, lower_layer=e.lower_layer_grid)
    tables = ablation_suite(task, model, steering, grids, e.ablation_prompts, e.prompt_seed)
    for name, rows in tables.items():
        print(name)
        for r in rows:
            print(f"  {r['value']!s:>10}  halluc {r['hallucination_rate']}  recall {r['object_recall']}")
    return _written(emit_reports(args.out, ablations=tables), args.out)


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    task, model, steering = _setup(cfg)
    e = cfg.experiment
    p = task.prompt(0, e.prompt_seed)
    report = throughput_bench(model, (p.text, p.image), steering, e.bench_tokens, e.bench_runs)
    if args.scaling:
        report.overhead = overhead_scaling(n_tokens=e.bench_tokens, n_runs=e.bench_runs)
    d = report.to_dict()
    print(f"throughput ratio {report.ratio:.3f}  ({report.tokens_per_s_steered:.1f} vs {report.tokens_per_s_unsteered:.1f} tok/s)")
    if report.overhead is not None:
        print(f"overhead slope {report.overhead.slope * 1e6:.2f} us/layer, R^2 {report.overhead.r2:.4f}")
    return _written(emit_reports(args.out, throughput=d), args.out)


def cmd_analyze(args) -> int:
    traces = read_traces(args.traces)
    report = bin_analysis(traces, args.bins, args.layer)
    for b in report.bins:
        print(f"bin {b.index + 1}: n={b.count} rate={b.rate:.4f} [{b.lo:.4f}, {b.hi:.4f}]")
    return _written(emit_reports(args.out, bins=report), args.out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="barriersteer", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("selftest", help="run the built-in oracle checks").set_defaults(fn=cmd_selftest)

    p = sub.add_parser("decode", help="caption one prompt and print its trace")
    p.add_argument("--config")
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(fn=cmd_decode)

    for name, fn, hlp in (
        ("run", cmd_run, "full experiment from a run config"),
        ("ablate", cmd_ablate, "one-at-a-time hyperparameter sweeps"),
        ("bench", cmd_bench, "steered vs unsteered decode throughput"),
    ):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--config")
        p.add_argument("--out", default="out")
        p.set_defaults(fn=fn)
        if name == "bench":
            p.add_argument("--scaling", action="store_true", help="also fit overhead against steered-layer count")

    p = sub.add_parser("analyze", help="bin a traces.csv by barrier")
    p.add_argument("traces")
    p.add_argument("--out", default="out")
    p.add_argument("--bins", type=int, default=9)
    p.add_argument("--layer", type=int, default=None)
    p.set_defaults(fn=cmd_analyze)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:  # bad traces file contents, too few tokens to bin, ...
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
