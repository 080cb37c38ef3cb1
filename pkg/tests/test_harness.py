"""Experiment orchestration, persistence, resume, and the CLI."""
import dataclasses
import json
import shutil

import numpy as np
import pytest

from dpakit import cli, harness, learners
from dpakit.harness import ExperimentConfig, StageError, mix_seed


def small_config(out_dir, **overrides):
    base = dict(num_classes=4, per_class=60, shape=(4, 4, 1), noise=20,
                learner_kind="nearest_centroid", k_values=(1, 4),
                topn=(1, 2), out_dir=str(out_dir))
    base.update(overrides)
    return ExperimentConfig(**base)


class TestConfig:
    def test_toml_round_trip(self, tmp_path):
        text = """
[dataset]
generator = "blobs"
seed = 3
num_classes = 4
per_class = 60
shape = [4, 4, 1]
noise = 20

[hash]
seed = 5

[dpa]
k = [1, 4]
learner = "mlp"
base_width = 16
epochs = 5
lr_peak = 0.1
lr_start = 0.005
lr_final = 0.00005

[[attack]]
patch_size = 2
budget_fraction = 0.05

[eval]
topn = [1, 3]

[output]
dir = "runs/demo"
"""
        path = tmp_path / "exp.toml"
        path.write_text(text)
        config = harness.load_config(path)
        assert config.k_values == (1, 4)
        assert config.learner_kind == "mlp"
        assert config.hash_seed == 5
        assert len(config.attacks) == 1
        assert config.attacks[0].budget_fraction == 0.05
        assert config.topn == (1, 3)

    def test_empty_k_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(k_values=())

    def test_env_var_overrides_output_dir(self, tmp_path, monkeypatch):
        config = small_config(tmp_path / "a")
        monkeypatch.setenv(harness.OUTPUT_DIR_ENV, str(tmp_path / "b"))
        assert config.resolved_out_dir() == tmp_path / "b"

    def test_mix_seed_spreads(self):
        seeds = {mix_seed(7, k, i) for k in range(4) for i in range(50)}
        assert len(seeds) == 200


class TestRunExperiment:
    def test_k1_row_equals_single_model_baseline(self, tmp_path):
        config = small_config(tmp_path / "run", k_values=(1,))
        report = harness.run_experiment(config)
        row = report["rows"][0]
        assert row["k"] == 1
        assert row["clean_acc"] == row["single_fraction_acc"]

    def test_report_files_and_schema(self, tmp_path):
        config = small_config(tmp_path / "run")
        report = harness.run_experiment(config)
        out = tmp_path / "run"
        assert (out / "report.json").exists()
        assert (out / "accuracy_table.csv").exists()
        assert (out / "data_complexity_table.csv").exists()
        assert (out / "timings.json").exists()
        loaded = json.loads((out / "report.json").read_text())
        assert loaded == report
        for row in loaded["rows"]:
            assert set(row) == {"k", "clean_acc", "mean_radius",
                                "median_radius", "certified_acc_at_r",
                                "single_fraction_acc", "asr"}
            for n, acc in row["clean_acc"].items():
                assert 0.0 <= acc <= 1.0

    def test_certified_accuracy_curve_properties(self, tmp_path):
        config = small_config(tmp_path / "run", k_values=(7,))
        report = harness.run_experiment(config)
        row = report["rows"][0]
        curve = row["certified_acc_at_r"]
        assert curve == sorted(curve, reverse=True)
        assert curve[0] == pytest.approx(row["clean_acc"]["1"])

    def test_identical_config_identical_bytes(self, tmp_path):
        config = small_config(tmp_path / "run")
        harness.run_experiment(config, workers=1)
        first = (tmp_path / "run" / "report.json").read_bytes()
        model_bytes = (tmp_path / "run" / "ensemble_k4" / "model_000.dpam").read_bytes()
        shutil.rmtree(tmp_path / "run")
        harness.run_experiment(config, workers=2)
        assert (tmp_path / "run" / "report.json").read_bytes() == first
        assert (tmp_path / "run" / "ensemble_k4"
                / "model_000.dpam").read_bytes() == model_bytes

    def test_resume_retrains_only_missing_partition(self, tmp_path, monkeypatch):
        config = small_config(tmp_path / "run")
        harness.run_experiment(config)
        first = (tmp_path / "run" / "report.json").read_bytes()
        (tmp_path / "run" / "ensemble_k4" / "model_002.dpam").unlink()
        calls = []
        real_train = learners.train

        def counting_train(*args, **kwargs):
            calls.append(1)
            return real_train(*args, **kwargs)

        monkeypatch.setattr(learners, "train", counting_train)
        harness.run_experiment(config)
        assert len(calls) == 1  # only the deleted partition retrains
        assert (tmp_path / "run" / "report.json").read_bytes() == first

    def test_stage_error_names_stage(self, tmp_path):
        config = small_config(tmp_path / "run",
                              dataset_file=str(tmp_path / "missing.dpad"))
        with pytest.raises(StageError, match="dataset"):
            harness.run_experiment(config)


class TestEstimateMaxK:
    def test_tiny_floor_returns_largest_probe(self, tmp_path):
        config = small_config(tmp_path / "x", k_values=(1, 2, 4))
        assert harness.estimate_max_k(config, 1e-9) == 4

    def test_unreachable_floor_returns_one(self, tmp_path):
        config = small_config(tmp_path / "x", noise=127,
                              learner_kind="logistic", epochs=1,
                              lr_peak=0.01, lr_start=0.001, lr_final=0.0001)
        assert harness.estimate_max_k(config, 1.0) == 1

    def test_noiseless_blobs_support_many_partitions(self, tmp_path):
        # Centroid sample complexity on noiseless blobs is ~1 per class,
        # so even 1/16 of the data clears a 0.99 floor.
        config = small_config(tmp_path / "x", noise=0, per_class=100,
                              k_values=(1, 4, 16))
        assert harness.estimate_max_k(config, 0.99) == 16


class TestCli:
    def test_gen_data_and_pipeline(self, tmp_path, capsys):
        data_path = tmp_path / "blobs.dpad"
        assert cli.main(["gen-data", "--seed", "3", "--num-classes", "4",
                         "--per-class", "30", "--shape", "4", "4", "1",
                         "--out", str(data_path)]) == 0
        config_path = tmp_path / "exp.toml"
        config_path.write_text(f"""
[dataset]
file = "{data_path}"
split_fraction = 0.8
split_seed = 1

[dpa]
k = [3]

[output]
dir = "{tmp_path / 'out'}"
""")
        assert cli.main(["train", "--config", str(config_path)]) == 0
        assert (tmp_path / "out" / "ensemble_k3" / "manifest.json").exists()

        testset = tmp_path / "test.dpad"
        cli.main(["gen-data", "--seed", "3", "--num-classes", "4",
                  "--per-class", "5", "--shape", "4", "4", "1",
                  "--out", str(testset)])
        assert cli.main(["predict", "--ensemble",
                         str(tmp_path / "out" / "ensemble_k3"),
                         "--input", str(testset)]) == 0
        assert cli.main(["certify", "--ensemble",
                         str(tmp_path / "out" / "ensemble_k3"),
                         "--testset", str(testset)]) == 0
        out = capsys.readouterr().out
        assert out.strip()

    def test_hash_audit_clean(self, tmp_path, capsys):
        config_path = tmp_path / "exp.toml"
        config_path.write_text("""
[dataset]
num_classes = 3
per_class = 40
shape = [4, 4, 1]
""")
        assert cli.main(["hash-audit", "--config", str(config_path)]) == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["collisions"] == 0

    def test_estimate_k_command(self, tmp_path, capsys):
        config_path = tmp_path / "exp.toml"
        config_path.write_text("""
[dataset]
num_classes = 3
per_class = 40
shape = [4, 4, 1]
noise = 0

[dpa]
k = [1, 2, 4]
""")
        assert cli.main(["estimate-k", "--config", str(config_path),
                         "--floor", "0.9"]) == 0
        assert capsys.readouterr().out.strip() == "4"

    def test_missing_file_is_error_exit(self, tmp_path, capsys):
        config_path = tmp_path / "exp.toml"
        config_path.write_text(f"""
[dataset]
file = "{tmp_path / 'nope.dpad'}"
""")
        assert cli.main(["hash-audit", "--config", str(config_path)]) != 0
