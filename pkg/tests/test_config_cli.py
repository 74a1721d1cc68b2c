import json

import pytest

from barriersteer.cli import main
from barriersteer.config import ConfigError, RunConfig, config_from_dict, load_config

SMALL = {"experiment": {"n_prompts": 12, "ablation_prompts": 4, "alpha_grid": [0.5, 1.0],
                        "lower_layer_grid": [2], "bench_tokens": 5, "bench_runs": 2}}


def write(tmp_path, doc, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg == RunConfig()
        assert cfg.steering.steered_layers == (2, 3, 4) and cfg.steering.tau is None
        assert cfg.experiment.n_prompts == 500 and cfg.model_config().d_model == 64

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="tua"):
            config_from_dict({"steering": {"tua": 1.0}})

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            config_from_dict({"stearing": {}})

    def test_bad_values(self):
        for doc in ({"steering": {"mode": "sideways"}}, {"steering": {"alpha": -1}},
                    {"steering": {"steered_layers": [9]}}, {"experiment": {"policy": "beam"}},
                    {"task": {"n_present": 99}}, {"model": {"d_model": 30}}):
            with pytest.raises(ConfigError):
                config_from_dict(doc)

    def test_lists_become_tuples(self):
        cfg = config_from_dict({"steering": {"steered_layers": [4, 2]}, "task": {"brightness": [0.5, 1.0]}})
        assert cfg.steering.steered_layers == (4, 2) and cfg.task.brightness == (0.5, 1.0)

    def test_round_trip(self):
        cfg = config_from_dict({"steering": {"tau": 1.5}, "experiment": {"n_prompts": 3}})
        assert config_from_dict(cfg.to_dict()) == cfg

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{nope")
        with pytest.raises(ConfigError):
            load_config(p)


class TestCli:
    def test_selftest(self, capsys):
        assert main(["selftest"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_decode(self, capsys):
        assert main(["decode", "--index", "2"]) == 0
        out = capsys.readouterr().out
        assert "objects in image" in out and "step   0" in out

    def test_run_and_analyze(self, tmp_path, capsys):
        cfg = write(tmp_path, SMALL)
        out = tmp_path / "run"
        assert main(["run", "--config", cfg, "--out", str(out)]) == 0
        for name in ("summary.json", "traces.csv", "bins.csv", "bins.svg"):
            assert (out / name).exists()
        summary = json.loads((out / "summary.json").read_text())
        assert {"steered", "unsteered", "tau", "config", "selectivity"} <= set(summary)
        assert main(["analyze", str(out / "traces.csv"), "--out", str(tmp_path / "an")]) == 0
        assert (tmp_path / "an" / "bins.csv").read_bytes() == (out / "bins.csv").read_bytes()

    def test_ablate(self, tmp_path):
        cfg = write(tmp_path, SMALL)
        assert main(["ablate", "--config", cfg, "--out", str(tmp_path / "ab")]) == 0
        names = {p.name for p in (tmp_path / "ab").iterdir()}
        assert {"ablation_alpha.csv", "ablation_tau.csv", "ablation_lower_layer.csv",
                "ablation_injection.csv", "ablation_gating.csv"} <= names

    def test_bench(self, tmp_path):
        cfg = write(tmp_path, SMALL)
        assert main(["bench", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "b" / "throughput.json").exists()

    def test_exit_codes(self, tmp_path, capsys):
        assert main(["run", "--config", write(tmp_path, {"steering": {"tua": 1}})]) == 1
        assert main(["run", "--config", str(tmp_path / "missing.json")]) == 3
        assert main(["analyze", str(tmp_path / "missing.csv")]) == 3
        nan_cfg = tmp_path / "nan.json"
        nan_cfg.write_text('{"task": {"prior_bias": NaN}}')
        assert main(["decode", "--config", str(nan_cfg)]) == 2
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        assert main(["run", "--config", write(tmp_path, SMALL), "--out", str(blocker / "x")]) == 3

    def test_top_p_policy(self, tmp_path):
        cfg = write(tmp_path, {"experiment": {"policy": "top_p", "n_prompts": 2}, "steering": {"tau": 1.0}})
        assert main(["decode", "--config", cfg]) == 0
