#!/usr/bin/env python3
"""
Experiment helpers: standard task, outlier identification, grid handling and manifests
"""
import math

import numpy as np
import pandas as pd
import pytest

from config import LearningRateSchedule, LossChannel, NoiseSpec, RefinementVariant
from core import ConfigError, LabeledSample, Provenance
from experiments import (
    ACCEPTANCE_COLUMNS,
    StandardTask,
    acceptance,
    dedupe_grid,
    hash_file,
    load_manifest,
    outlier_identification,
    verify_outputs,
    write_json,
    write_manifest,
)


def _sample(sid, provenance):
    return LabeledSample(sid, np.zeros((1, 3)), 0.0, np.zeros((1, 3)), provenance=provenance)


def test_standard_task_defaults():
    task = StandardTask()
    config = task.run_config()
    assert config.loss_spec.lambda_energy == 0.0
    assert config.loss_channel == LossChannel.FORCE
    assert config.weight_policy.z_threshold == pytest.approx(1.2816, abs=1e-3)
    assert task.snapshot_epochs() == [0, 21, 499]
    assert task.run_config(bootstrap=False).weight_policy is None
    assert task.run_config(z_threshold=math.inf).weight_policy.z_threshold == math.inf
    assert config.lr_schedule == LearningRateSchedule.COSINE
    assert task.noise.force_noise_magnitude == (2.0, 2.0)
    plan = task.refinement_plan()
    assert plan.z_threshold == pytest.approx(1.2816, abs=1e-3)
    assert plan.variant == RefinementVariant.VANILLA
    assert task.refinement_plan(bootstrap=True, cycles=2).variant == RefinementVariant.BOOTSTRAPPED


def test_standard_task_dataset_is_small_and_noisy():
    task = StandardTask(n=20, particles=3)
    samples = task.dataset()
    assert len(samples) == 20
    assert sum(s.provenance == Provenance.CORRUPTED for s in samples) == 2


def test_outlier_identification():
    train_set = [_sample(0, Provenance.CORRUPTED), _sample(1, Provenance.CORRUPTED),
                 _sample(2, Provenance.CLEAN), _sample(3, Provenance.CLEAN)]
    summary = outlier_identification(train_set, {0: 0.01, 1: 0.4, 2: 0.99, 3: 0.3})
    assert summary.corrupted_low_weight_share == 0.5
    assert summary.clean_low_weight_share == 0.5
    assert outlier_identification(train_set[2:], {2: 1.0, 3: 1.0}).corrupted_low_weight_share is None


def test_dedupe_grid_keeps_first_occurrence():
    assert dedupe_grid([2.0, 1.0, 2.0, 1.28]) == [2.0, 1.0, 1.28]
    with pytest.raises(ConfigError):
        dedupe_grid([])


def test_manifest_detects_changed_output(tmp_path):
    data = write_json({"a": 1}, tmp_path / "input.json")
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    output = write_json({"b": 2}, run_dir / "result.json")
    manifest = write_manifest(run_dir, "train", {"seed": 1}, {}, 1, [data], [output])
    assert load_manifest(run_dir) == manifest
    assert manifest.outputs == {"result.json": hash_file(output)}
    assert verify_outputs(manifest, run_dir) == []
    write_json({"b": 3}, output)
    assert verify_outputs(manifest, run_dir) == ["result.json"]


def test_scaled_down_task_orders_the_runs(tmp_path):
    task = StandardTask(n=120, particles=3, epochs=40, learning_rate=1e-2,
                        noise=NoiseSpec(fraction=0.1, force_noise_magnitude=(4.0, 4.0)))
    gates = {g.gate: g for g in acceptance(task, tmp_path, groups=("curves",))}
    assert set(gates) == {
        "vanilla_noisy_below_injected", "vanilla_truth_error_rises", "boot_noisy_plateau",
        "boot_truth_vs_clean_validation", "corrupted_low_weight_share", "clean_low_weight_share", "validation_ratio",
    }
    assert gates["validation_ratio"].value < 1.0
    assert gates["corrupted_low_weight_share"].value > gates["clean_low_weight_share"].value
    table = pd.read_csv(tmp_path / "acceptance.csv")
    assert list(table.columns) == ACCEPTANCE_COLUMNS
    assert (tmp_path / "vanilla" / "epochs.csv").exists() and (tmp_path / "boot" / "epochs.csv").exists()


def test_acceptance_rejects_unknown_group(tmp_path):
    with pytest.raises(ConfigError):
        acceptance(StandardTask(n=20, particles=3, epochs=1), tmp_path, groups=("everything",))


@pytest.mark.slow
def test_standard_task_passes_every_gate(tmp_path):
    gates = acceptance(StandardTask(), tmp_path)
    failed = [(g.gate, g.value, g.bound) for g in gates if not g.passed]
    assert not failed


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
