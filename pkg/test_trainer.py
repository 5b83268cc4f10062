#!/usr/bin/env python3
"""
Training loop, optimizer, evaluation and telemetry
"""
import math
from dataclasses import astuple

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from config import (
    CompositeLossSpec,
    LearningRateSchedule,
    LossChannel,
    ModelConfig,
    NoiseSpec,
    OptimizerKind,
    RunConfig,
    WeightPolicy,
)
from core import LabeledSample, NonFiniteError, Provenance, split_train_validation
from datagen import corrupt, generate_clean
from models import build_model
from stats import trace_jumps_within_bound
from trainer import (
    OptimizerState,
    batch_gradient,
    evaluate,
    evaluate_subsets,
    optimizer_step,
    scheduled_learning_rate,
    train,
    write_training_log,
)

FORCE_ONLY = CompositeLossSpec(lambda_energy=0.0, lambda_force=1.0)
MODEL = ModelConfig(hidden_widths=[8], cutoff=3.5)


def _noisy_split(n=80, particles=3, fraction=0.1, seed=0):
    clean = generate_clean(n, particles, seed=seed, displacement=0.01)
    samples = corrupt(clean, NoiseSpec(fraction=fraction, force_noise_magnitude=(4.0, 4.0)), seed=seed)
    return split_train_validation(samples, 0.15, seed)


def _config(**overrides):
    base = dict(seed=3, epochs=3, batch_size=8, learning_rate=1e-2, loss_spec=FORCE_ONLY,
                loss_channel=LossChannel.FORCE, model=MODEL)
    base.update(overrides)
    return RunConfig(**base)


def test_sgd_step():
    config = RunConfig(optimizer=OptimizerKind.SGD, learning_rate=0.1)
    updated, state = optimizer_step(np.array([1.0]), np.array([2.0]), OptimizerState.zeros(1), config)
    assert updated[0] == pytest.approx(0.8)
    assert state.step == 1


def test_zero_gradient_leaves_parameters():
    theta = np.array([0.5, -1.0])
    for kind in OptimizerKind:
        config = RunConfig(optimizer=kind, learning_rate=0.1)
        updated, _ = optimizer_step(theta, np.zeros(2), OptimizerState.zeros(2), config)
        np.testing.assert_array_equal(updated, theta)


def test_adam_first_step_moves_by_learning_rate():
    config = RunConfig(optimizer=OptimizerKind.ADAPTIVE_MOMENTS, learning_rate=0.01)
    updated, state = optimizer_step(np.zeros(4), np.ones(4), OptimizerState.zeros(4), config)
    np.testing.assert_allclose(updated, -0.01 * np.ones(4), rtol=1e-6)
    np.testing.assert_allclose(state.first_moment, 0.1)
    np.testing.assert_allclose(state.second_moment, 0.001)


def test_learning_rate_override():
    config = RunConfig(optimizer=OptimizerKind.SGD, learning_rate=0.1)
    updated, _ = optimizer_step(np.array([1.0]), np.array([2.0]), OptimizerState.zeros(1), config, 0.5)
    assert updated[0] == pytest.approx(0.0)


def test_cosine_schedule_endpoints():
    config = RunConfig(learning_rate=0.02, lr_schedule=LearningRateSchedule.COSINE, lr_final_fraction=0.05)
    assert scheduled_learning_rate(config, 0, 101) == pytest.approx(0.02)
    assert scheduled_learning_rate(config, 50, 101) == pytest.approx(0.5 * (0.02 + 0.001))
    assert scheduled_learning_rate(config, 100, 101) == pytest.approx(0.001)
    rates = [scheduled_learning_rate(config, k, 101) for k in range(101)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    constant = RunConfig(learning_rate=0.02)
    assert {scheduled_learning_rate(constant, k, 101) for k in (0, 50, 100)} == {0.02}


def test_non_finite_gradient_aborts():
    with pytest.raises(NonFiniteError):
        optimizer_step(np.zeros(2), np.array([np.nan, 0.0]), OptimizerState.zeros(2), RunConfig())


def test_zero_epochs_returns_initial_model():
    train_set, validation_set = _noisy_split(n=20)
    model = build_model(MODEL, seed=1)
    trained, log = train(model, train_set, validation_set, _config(epochs=0))
    np.testing.assert_array_equal(trained.parameters, model.parameters)
    assert log.epochs == []


def test_overlapping_sets_rejected():
    train_set, _ = _noisy_split(n=20)
    with pytest.raises(ValueError):
        train(build_model(MODEL, seed=1), train_set, train_set[:2], _config())


def test_infinite_threshold_matches_vanilla_bit_for_bit():
    train_set, validation_set = _noisy_split(n=40)
    vanilla_model, vanilla = train(build_model(MODEL, 3), train_set, validation_set, _config(), track_parameters=True)
    sentinel_model, sentinel = train(
        build_model(MODEL, 3), train_set, validation_set,
        _config(weight_policy=WeightPolicy(z_threshold=math.inf)), track_parameters=True,
    )
    assert len(vanilla.parameter_history) == len(sentinel.parameter_history) > 0
    for a, b in zip(vanilla.parameter_history, sentinel.parameter_history):
        assert np.array_equal(a, b)
    assert np.array_equal(vanilla_model.parameters, sentinel_model.parameters)
    assert all(r.mean_weight == 1.0 for r in sentinel.epochs)


def test_provenance_never_reaches_training():
    train_set, validation_set = _noisy_split(n=40, fraction=0.2)
    relabeled = [
        LabeledSample(s.id, s.positions, s.energy_ref, s.forces_ref, s.aux_ref,
                      provenance=Provenance.CLEAN if s.provenance == Provenance.CORRUPTED else Provenance.CORRUPTED)
        for s in train_set
    ]
    config = _config(weight_policy=WeightPolicy(z_threshold=1.28))
    first, _ = train(build_model(MODEL, 3), train_set, validation_set, config)
    second, _ = train(build_model(MODEL, 3), relabeled, validation_set, config)
    assert np.array_equal(first.parameters, second.parameters)


def test_training_is_deterministic():
    train_set, validation_set = _noisy_split(n=40)
    config = _config(weight_policy=WeightPolicy(z_threshold=1.28))
    first_model, first = train(build_model(MODEL, 3), train_set, validation_set, config)
    second_model, second = train(build_model(MODEL, 3), train_set, validation_set, config)
    assert np.array_equal(first_model.parameters, second_model.parameters)
    np.testing.assert_equal([astuple(r) for r in first.epochs], [astuple(r) for r in second.epochs])
    assert first.final_weights == second.final_weights


def test_zero_static_weights_freeze_parameters():
    train_set, validation_set = _noisy_split(n=20)
    model = build_model(MODEL, seed=2)
    trained, _ = train(model, train_set, validation_set, _config(), static_weights={s.id: 0.0 for s in train_set})
    np.testing.assert_array_equal(trained.parameters, model.parameters)


def test_suppressed_sample_contributes_negligible_gradient():
    train_set, _ = _noisy_split(n=20)
    model = build_model(MODEL, seed=4)
    sample = train_set[0]
    _, full, _ = batch_gradient(model, [sample], [1.0], FORCE_ONLY)
    _, suppressed, _ = batch_gradient(model, [sample], [1e-7], FORCE_ONLY)
    assert np.linalg.norm(suppressed) < 1e-6 * np.linalg.norm(full)


def test_batch_gradient_unit_weights_is_plain_mean():
    train_set, _ = _noisy_split(n=20)
    model = build_model(MODEL, seed=4)
    value, _, losses = batch_gradient(model, train_set[:3], [1.0, 1.0, 1.0], FORCE_ONLY)
    assert value == pytest.approx(sum(l.total for l in losses) / 3)


def test_non_finite_loss_names_sample():
    train_set, validation_set = _noisy_split(n=20)
    bad = train_set[2]
    broken = list(train_set)
    broken[2] = LabeledSample(bad.id, bad.positions, math.inf, bad.forces_ref)
    config = _config(loss_spec=CompositeLossSpec(lambda_energy=1.0, lambda_force=1.0), loss_channel=LossChannel.TOTAL)
    with pytest.raises(NonFiniteError) as excinfo:
        train(build_model(MODEL, 1), broken, validation_set, config)
    assert excinfo.value.sample_id == bad.id
    assert str(bad.id) in str(excinfo.value)


def test_noisy_samples_get_low_weights():
    train_set, validation_set = _noisy_split(n=120, fraction=0.1)
    config = _config(epochs=15, weight_policy=WeightPolicy(z_threshold=1.28))
    _, log = train(build_model(MODEL, 3), train_set, validation_set, config)
    corrupted = [log.final_weights[s.id] for s in train_set if s.provenance == Provenance.CORRUPTED]
    clean = [log.final_weights[s.id] for s in train_set if s.provenance == Provenance.CLEAN]
    assert np.mean(corrupted) < 0.5
    assert np.mean(clean) > 0.7
    assert all(0.0 <= w <= 1.0 for w in log.final_weights.values())


def test_worker_merge_is_plain_average():
    train_set, validation_set = _noisy_split(n=80)
    config = _config(workers=4, weight_policy=WeightPolicy(z_threshold=2.0))
    _, log = train(build_model(MODEL, 3), train_set, validation_set, config)
    assert len(log.merges) == 4 * config.epochs
    for epoch in range(config.epochs):
        records = [m for m in log.merges if m.epoch == epoch]
        mus = sorted(m.worker_mu for m in records)
        variances = sorted(m.worker_var for m in records)
        assert records[0].merged_mu == math.fsum(mus) / 4
        assert records[0].merged_var == math.fsum(variances) / 4
        assert records[0].merged_mu == pytest.approx(np.mean(mus), rel=1e-14)


def test_more_workers_than_batches():
    # 17 training samples in batches of 8 leave the fourth worker idle
    train_set, validation_set = _noisy_split(n=20)
    assert len(train_set) == 17
    config = _config(workers=4, weight_policy=WeightPolicy(z_threshold=2.0))
    _, log = train(build_model(MODEL, 3), train_set, validation_set, config)
    assert len(log.epochs) == config.epochs
    for epoch in range(config.epochs):
        records = [m for m in log.merges if m.epoch == epoch]
        assert [m.worker for m in records] == [0, 1, 2]
        assert records[0].merged_mu == math.fsum(sorted(m.worker_mu for m in records)) / 3


def test_auxiliary_channel_is_rejected():
    spec = CompositeLossSpec(lambda_energy=0.0, lambda_force=1.0, lambda_aux=0.5)
    with pytest.raises(ValidationError):
        _config(loss_spec=spec)


def test_cosine_schedule_trains_to_a_finite_model():
    train_set, validation_set = _noisy_split(n=40)
    config = _config(epochs=4, lr_schedule=LearningRateSchedule.COSINE, weight_policy=WeightPolicy(z_threshold=1.28))
    model, log = train(build_model(MODEL, 3), train_set, validation_set, config)
    assert np.all(np.isfinite(model.parameters))
    assert all(math.isfinite(r.validation_rmse) for r in log.epochs)


def test_ema_trace_is_smooth():
    train_set, validation_set = _noisy_split(n=80)
    _, log = train(build_model(MODEL, 3), train_set, validation_set, _config(weight_policy=WeightPolicy()))
    mus = [p.mu for p in log.ema_trace]
    means = [p.batch_mean for p in log.ema_trace]
    assert len(mus) > 1
    assert trace_jumps_within_bound(mus, means, log.alpha)


def test_evaluate_perfect_model_is_zero():
    model = build_model(MODEL, seed=5)
    samples = generate_clean(6, 3, seed=5)
    labeled = []
    for s in samples:
        output = model.forward(s.positions)
        labeled.append(LabeledSample(s.id, s.positions, output.energy, output.forces))
    result = evaluate(model, labeled, FORCE_ONLY)
    assert result.energy_rmse == 0.0
    assert result.force_rmse == 0.0
    assert set(result.per_sample_errors) == {s.id for s in samples}


def test_constant_energy_model_rmse_is_label_std():
    model = build_model(MODEL, seed=5)
    zero = model.with_parameters(np.zeros_like(model.parameters))
    samples = generate_clean(30, 3, seed=6)
    energies = np.array([s.energy_ref for s in samples])
    centered = [LabeledSample(s.id, s.positions, e, s.forces_ref) for s, e in zip(samples, energies - energies.mean())]
    result = evaluate(zero, centered, FORCE_ONLY)
    assert result.energy_rmse == pytest.approx(np.std(energies), rel=1e-12)
    assert evaluate(zero, centered, FORCE_ONLY).per_sample_errors == result.per_sample_errors


def test_evaluate_subsets_split_by_provenance():
    train_set, _ = _noisy_split(n=60, fraction=0.2)
    model = build_model(MODEL, seed=1)
    subsets = evaluate_subsets(model, train_set, FORCE_ONLY)
    assert subsets.noisy_rmse > subsets.noisy_truth_rmse
    assert math.isfinite(subsets.clean_rmse)


def test_log_files(tmp_path):
    train_set, validation_set = _noisy_split(n=40)
    _, log = train(build_model(MODEL, 3), train_set, validation_set, _config(snapshot_every=1))
    written = write_training_log(log, tmp_path)
    names = {p.name for p in written}
    assert {"epochs.csv", "samples.jsonl", "ema_trace.csv"} <= names
    epochs = pd.read_csv(tmp_path / "epochs.csv")
    assert list(epochs.columns[:5]) == ["epoch", "clean_rmse", "noisy_rmse", "val_rmse", "mean_weight"]
    assert (epochs["mean_weight"] == 1.0).all()
    lines = (tmp_path / "samples.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3 * len(train_set)


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
