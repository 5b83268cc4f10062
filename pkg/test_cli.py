#!/usr/bin/env python3
"""
End-to-end tests of the nrt command line: generate, train, refine, sweep, report, replay
"""
import json

import pandas as pd
import pytest

from cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main, parse_args, run_config_from_args
from config import EnergyReduction, LearningRateSchedule
from core import Provenance, load_dataset
from experiments import MANIFEST_NAME, hash_file, load_manifest

SMALL_TRAINING = ["--epochs", "2", "--batch-size", "8", "--hidden", "6", "--cutoff", "3.5",
                  "--learning-rate", "0.01", "--log-level", "WARNING"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "dataset.jsonl"
    code = main(["generate", "--n", "40", "--particles", "3", "--noise-fraction", "0.1",
                 "--seed", "3", "--out", str(path), "--log-level", "WARNING"])
    assert code == EXIT_OK
    return path


def _train(dataset, out, *extra):
    return main(["train", "--dataset", str(dataset), "--out", str(out), "--seed", "3", *SMALL_TRAINING, *extra])


def test_generate_counts_corrupted(dataset):
    samples = load_dataset(dataset)
    assert len(samples) == 40
    assert sum(s.provenance == Provenance.CORRUPTED for s in samples) == 4


def test_generate_empty_dataset(tmp_path):
    path = tmp_path / "empty.jsonl"
    assert main(["generate", "--n", "0", "--out", str(path)]) == EXIT_OK
    assert load_dataset(path) == []


def test_generate_rejects_bad_fraction(tmp_path):
    assert main(["generate", "--n", "5", "--noise-fraction", "1.5", "--out", str(tmp_path / "x.jsonl")]) == EXIT_USAGE


def test_train_missing_dataset(tmp_path):
    assert _train(tmp_path / "nope.jsonl", tmp_path / "run") == EXIT_FAILED


def test_train_without_dataset_flag(tmp_path):
    assert main(["train", "--out", str(tmp_path / "run")]) == EXIT_USAGE


def test_vanilla_run_has_unit_weights(tmp_path, dataset):
    assert _train(dataset, tmp_path / "vanilla", "--bootstrap", "off") == EXIT_OK
    epochs = pd.read_csv(tmp_path / "vanilla" / "epochs.csv")
    assert len(epochs) == 2
    assert (epochs["mean_weight"] == 1.0).all()
    summary = json.loads((tmp_path / "vanilla" / "summary.json").read_text())
    assert summary["bootstrap"] is False


def test_reruns_are_byte_identical(tmp_path, dataset):
    for name in ("first", "second"):
        assert _train(dataset, tmp_path / name, "--bootstrap", "on", "--z-threshold", "1.28") == EXIT_OK
    first = {p.name: hash_file(p) for p in (tmp_path / "first").iterdir() if p.name != MANIFEST_NAME}
    second = {p.name: hash_file(p) for p in (tmp_path / "second").iterdir() if p.name != MANIFEST_NAME}
    assert first == second
    assert load_manifest(tmp_path / "first").outputs == load_manifest(tmp_path / "second").outputs


def test_workers_write_merges(tmp_path, dataset):
    assert _train(dataset, tmp_path / "workers", "--bootstrap", "on", "--workers", "2") == EXIT_OK
    merges = pd.read_csv(tmp_path / "workers" / "merges.csv")
    assert len(merges) == 4
    assert set(merges["worker"]) == {0, 1}


def test_model_and_loss_flags_reach_the_config():
    args = parse_args(["train", "--envelope-power", "3", "--input-scale", "0.5", "--basis-size", "8",
                       "--basis-min", "0.5", "--energy-reduction", "total_mse", "--lr-schedule", "cosine",
                       "--lr-final-fraction", "0.1"])
    config = run_config_from_args(args)
    assert (config.model.envelope_power, config.model.input_scale) == (3, 0.5)
    assert (config.model.basis_size, config.model.basis_min) == (8, 0.5)
    assert config.loss_spec.energy_reduction == EnergyReduction.TOTAL_MSE
    assert config.loss_spec.lambda_aux == 0.0
    assert (config.lr_schedule, config.lr_final_fraction) == (LearningRateSchedule.COSINE, 0.1)
    assert run_config_from_args(parse_args(["train"])).model.envelope_power == 2


def test_auxiliary_weight_is_a_usage_error(tmp_path, dataset):
    assert _train(dataset, tmp_path / "aux", "--lambda-aux", "1.0") == EXIT_USAGE


def test_refine_threshold_flag_overrides_default(tmp_path, dataset):
    out = tmp_path / "refine"
    code = main(["refine", "--dataset", str(dataset), "--out", str(out), "--cycles", "1",
                 "--refine-threshold", "2.5", *SMALL_TRAINING])
    assert code == EXIT_OK
    assert json.loads((out / "config.json").read_text())["z_threshold"] == 2.5


def test_acceptance_rejects_unknown_group(tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        main(["acceptance", "--out", str(tmp_path), "--groups", "everything"])
    assert excinfo.value.code == EXIT_USAGE


def test_refine_needs_a_cycle(tmp_path, dataset):
    code = main(["refine", "--dataset", str(dataset), "--out", str(tmp_path / "r"), "--cycles", "0", *SMALL_TRAINING])
    assert code == EXIT_USAGE


def test_refine_writes_error_table(tmp_path, dataset):
    out = tmp_path / "refine"
    code = main(["refine", "--dataset", str(dataset), "--out", str(out), "--cycles", "2", "--early-stop",
                 "--loss-channel", "force", *SMALL_TRAINING])
    assert code == EXIT_OK
    table = pd.read_csv(out / "error_table.csv")
    assert list(table["cycle"]) == [0, 1]
    assert list(table["variant"]) == ["early_stop", "early_stop"]
    assert list(table["epochs_trained"]) == [1, 3]
    weights = pd.read_csv(out / "weights.csv")
    assert set(weights["cycle"]) == {0, 1}
    plan = json.loads((out / "config.json").read_text())
    assert plan["z_threshold"] == pytest.approx(1.2816, abs=1e-4)


def test_sweep_deduplicates_grid(tmp_path, dataset):
    out = tmp_path / "sweep"
    code = main(["sweep-threshold", "--dataset", str(dataset), "--out", str(out),
                 "--grid", "1.0", "2.0", "1.0", *SMALL_TRAINING])
    assert code == EXIT_OK
    table = pd.read_csv(out / "sweep.csv")
    assert list(table["z_t"]) == [1.0, 2.0]
    assert (out / "z_1" / "epochs.csv").exists()
    assert (out / "z_2" / "epochs.csv").exists()


def test_sweep_rejects_empty_grid(tmp_path, dataset):
    code = main(["sweep-threshold", "--dataset", str(dataset), "--out", str(tmp_path / "s"), "--grid", *SMALL_TRAINING])
    assert code == EXIT_USAGE


def test_report_compares_runs(tmp_path, dataset):
    assert _train(dataset, tmp_path / "vanilla") == EXIT_OK
    assert _train(dataset, tmp_path / "boot", "--bootstrap", "on") == EXIT_OK
    out = tmp_path / "report"
    assert main(["report", str(tmp_path / "vanilla"), str(tmp_path / "boot"), "--out", str(out)]) == EXIT_OK
    curves = pd.read_csv(out / "report_curves.csv")
    assert "val_rmse_ratio" in curves.columns
    assert curves["val_rmse_ratio"].tolist() == pytest.approx(
        (curves["vanilla_val_rmse"] / curves["boot_val_rmse"]).tolist()
    )
    summary = pd.read_csv(out / "report_summary.csv")
    assert list(summary["run"]) == ["vanilla", "boot"]


def test_report_single_run_passes_through(tmp_path, dataset):
    assert _train(dataset, tmp_path / "only") == EXIT_OK
    assert main(["report", str(tmp_path / "only"), "--out", str(tmp_path / "report")]) == EXIT_OK
    curves = pd.read_csv(tmp_path / "report" / "report_curves.csv")
    assert "val_rmse_ratio" not in curves.columns
    assert list(curves["epoch"]) == [0, 1]


def test_report_rejects_mismatched_epochs(tmp_path, dataset):
    assert _train(dataset, tmp_path / "short") == EXIT_OK
    assert main(["train", "--dataset", str(dataset), "--out", str(tmp_path / "long"), "--seed", "3",
                 *SMALL_TRAINING, "--epochs", "3"]) == EXIT_OK
    assert main(["report", str(tmp_path / "short"), str(tmp_path / "long"), "--out", str(tmp_path / "r")]) == EXIT_FAILED


def test_report_missing_run(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty"), "--out", str(tmp_path / "r")]) == EXIT_FAILED


def test_replay_matches_manifest(tmp_path, dataset):
    assert _train(dataset, tmp_path / "original", "--bootstrap", "on") == EXIT_OK
    code = main(["replay", "--manifest", str(tmp_path / "original"), "--scratch", str(tmp_path / "replayed")])
    assert code == EXIT_OK
    manifest = load_manifest(tmp_path / "original" / MANIFEST_NAME)
    for relative, digest in manifest.outputs.items():
        assert hash_file(tmp_path / "replayed" / relative) == digest


def test_seed_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("NRT_SEED", "5")
    assert parse_args(["train"]).seed == 5
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"seed": 9, "epochs": 4}))
    args = parse_args(["train", "--config", str(config)])
    assert (args.seed, args.epochs) == (9, 4)
    assert parse_args(["train", "--config", str(config), "--seed", "1"]).seed == 1


def test_config_file_rejects_unknown_keys(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"not_a_flag": 1}))
    with pytest.raises(SystemExit) as excinfo:
        parse_args(["train", "--config", str(config)])
    assert excinfo.value.code == EXIT_USAGE


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
