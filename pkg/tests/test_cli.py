import json
from pathlib import Path

import pytest
import yaml

from indistill.cli import main
from indistill.config import ConfigError, load_config


def base_config(tmp_path, **overrides):
    config = {
        "output_dir": "out",
        "cache_dir": "out/cache",
        "max_in_flight": 4,
        "datasets": [
            {
                "family": "list-function",
                "generate": {"seed": 7, "count": 10, "rule_depth": 2, "n_demos": 4, "n_tests": 2},
            }
        ],
        "split": {"test_fraction": 0.2, "seed": 13},
        "backends": {
            "teacher": {
                "type": "dsl-mock",
                "seed": 101,
                "correct_rule_probability": 0.6,
                "follow_error_rate": 0.0,
            },
            "student": {
                "type": "dsl-mock",
                "seed": 202,
                "correct_rule_probability": 0.8,
                "follow_error_rate": 0.0,
            },
        },
        "augmentation": {
            "backend": "teacher",
            "model": "teacher-model",
            "m": 4,
            "rule_gen": {"temperature": 0.9, "top_p": 1.0},
            "rule_follow": {"temperature": 0.7, "top_p": 1.0},
        },
        "corpus": {"format": "chat", "margins": {"list-function": 1}},
        "inference": {
            "run_id": "hs-mock",
            "mode": "hypothesis-search",
            "m": 3,
            "rg_backend": "student",
            "model": "student-model",
        },
        "eval": {"runs": ["hs-mock"], "bootstrap_seed": 0},
        "toy_train": {"objective": "orpo", "steps": 60, "step_size": 0.5, "seed": 3},
        "sweep": {"m_values": [1, 2, 3]},
    }
    config.update(overrides)
    path = tmp_path / "pipeline.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=False))
    return path


def run(command, config_path, out=None):
    argv = [command, "--config", str(config_path)]
    if out:
        argv += ["--out", str(out)]
    return main(argv)


class TestConfigLoading:
    def test_example_config_validates(self):
        example = Path(__file__).parent.parent / "configs" / "example.yaml"
        config = load_config(example)
        assert config.augmentation.m == 5
        assert config.inference.rule_gen.temperature == 0.9

    def test_unknown_key_named(self, tmp_path):
        path = base_config(tmp_path, typo_section={"x": 1})
        with pytest.raises(ConfigError) as err:
            load_config(path)
        assert "typo_section" in str(err.value)

    def test_missing_backend_named(self, tmp_path):
        path = base_config(
            tmp_path,
            augmentation={"backend": "ghost", "m": 2},
        )
        with pytest.raises(ConfigError) as err:
            load_config(path)
        assert "ghost" in str(err.value)

    def test_wrong_type_names_key(self, tmp_path):
        path = base_config(tmp_path, max_in_flight="lots")
        with pytest.raises(ConfigError) as err:
            load_config(path)
        assert "max_in_flight" in str(err.value)

    def test_bad_fraction(self, tmp_path):
        path = base_config(tmp_path, split={"test_fraction": 1.5, "seed": 1})
        with pytest.raises(ConfigError) as err:
            load_config(path)
        assert "test_fraction" in str(err.value)


class TestCliCommands:
    def test_full_mock_pipeline(self, tmp_path, capsys):
        config_path = base_config(tmp_path)
        for command in ("augment", "build-corpus", "infer", "eval", "toy-train", "sweep"):
            assert run(command, config_path) == 0, command
        out = tmp_path / "out"
        assert (out / "augment" / "scored.jsonl").exists()
        assert (out / "corpus" / "sft.jsonl").exists()
        assert (out / "corpus" / "stats.json").exists()
        assert (out / "infer" / "hs-mock" / "results.jsonl").exists()
        assert (out / "eval" / "report-hs-mock.json").exists()
        assert (out / "eval" / "comparison.txt").exists()
        assert (out / "toy-train" / "trace.csv").exists()
        assert (out / "toy-train" / "ranking.json").exists()
        assert (out / "sweep" / "grid.json").exists()

    def test_manifests_record_zero_network_calls(self, tmp_path):
        config_path = base_config(tmp_path)
        run("augment", config_path)
        run("infer", config_path)
        for stage in ("augment", "infer/hs-mock"):
            manifest = json.loads((tmp_path / "out" / stage / "manifest.json").read_text())
            assert manifest["network_calls"] == 0
            assert manifest["tool"] == "indistill"
            assert manifest["config_digest"]

    def test_infer_idempotent_with_warm_cache(self, tmp_path):
        config_path = base_config(tmp_path)
        assert run("infer", config_path) == 0
        results = (tmp_path / "out" / "infer" / "hs-mock" / "results.jsonl").read_bytes()
        assert run("infer", config_path) == 0
        assert (tmp_path / "out" / "infer" / "hs-mock" / "results.jsonl").read_bytes() == results

    def test_two_cold_runs_are_byte_identical(self, tmp_path):
        config_path = base_config(tmp_path)
        run("augment", config_path, out=tmp_path / "run_a")
        run("build-corpus", config_path, out=tmp_path / "run_a")
        run("infer", config_path, out=tmp_path / "run_a")
        run("eval", config_path, out=tmp_path / "run_a")
        run("augment", config_path, out=tmp_path / "run_b")
        run("build-corpus", config_path, out=tmp_path / "run_b")
        run("infer", config_path, out=tmp_path / "run_b")
        run("eval", config_path, out=tmp_path / "run_b")
        for rel in (
            "augment/scored.jsonl",
            "corpus/sft.jsonl",
            "corpus/pref.jsonl",
            "corpus/io.jsonl",
            "corpus/stats.json",
            "infer/hs-mock/results.jsonl",
            "eval/report-hs-mock.json",
            "eval/comparison.txt",
        ):
            a = (tmp_path / "run_a" / rel).read_bytes()
            b = (tmp_path / "run_b" / rel).read_bytes()
            assert a == b, rel

    def test_config_error_exit_code(self, tmp_path, capsys):
        path = base_config(tmp_path, max_in_flight="lots")
        assert run("augment", path) == 2
        assert "max_in_flight" in capsys.readouterr().err

    def test_missing_api_key_is_startup_error(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("MISSING_TEST_KEY", raising=False)
        path = base_config(
            tmp_path,
            backends={
                "live": {"type": "http", "base_url": "http://x", "api_key_env": "MISSING_TEST_KEY"},
            },
            augmentation={"backend": "live", "m": 2},
            inference={"run_id": "r", "mode": "io", "rg_backend": "live"},
        )
        assert run("augment", path) == 2
        assert "MISSING_TEST_KEY" in capsys.readouterr().err

    def test_stage_failure_writes_summary(self, tmp_path, capsys):
        config_path = base_config(tmp_path)
        # build-corpus before augment: the scored table is missing.
        assert run("build-corpus", config_path) == 3
        failure = json.loads((tmp_path / "out" / "failure.json").read_text())
        assert failure["command"] == "build-corpus"
        assert "scored" in failure["error"]

    def test_missing_dataset_file_fails(self, tmp_path):
        path = base_config(
            tmp_path,
            datasets=[{"family": "list-function", "path": "nope.jsonl"}],
        )
        assert run("augment", path) == 3

    def test_toy_train_outputs(self, tmp_path):
        config_path = base_config(tmp_path)
        assert run("toy-train", config_path) == 0
        ranking = json.loads((tmp_path / "out" / "toy-train" / "ranking.json").read_text())
        assert ranking["final_mean_log_odds_ratio"] > ranking["initial_mean_log_odds_ratio"]
        trace = (tmp_path / "out" / "toy-train" / "trace.csv").read_text().splitlines()
        assert trace[0] == "step,loss,mean_log_odds_ratio"
        assert len(trace) == 61

    def test_sweep_grid_summary(self, tmp_path):
        config_path = base_config(tmp_path)
        assert run("sweep", config_path) == 0
        grid = json.loads((tmp_path / "out" / "sweep" / "grid.json").read_text())
        assert [point["m"] for point in grid] == [1, 2, 3]
        for point in grid:
            assert (tmp_path / "out" / "sweep" / point["results_file"]).exists()
