"""
Training loop for vanilla and bootstrapped (outlier down-weighting) fits.

Per batch: forward -> per-sample losses -> [update loss statistics ->
z-scores -> weights -> mean-weight check] -> squared-weight loss ->
backward -> optimizer step.  With several simulated workers the batches are
dealt round-robin, each worker keeps its own statistics and the statistics
are averaged and redistributed at the end of every epoch.

Only ``evaluate_subsets`` and ``SubsetMonitor`` read sample provenance; the
loop itself runs on provenance-free ``TrainingSample`` views.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import LearningRateSchedule, OptimizerKind, RunConfig
from core import (
    ContractViolation,
    LabeledSample,
    NonFiniteError,
    Provenance,
    SeedStreams,
    TrainingSample,
    make_batches,
)
from loss import (
    CompositeLossSpec,
    PerSampleLoss,
    bootstrapped_batch_loss,
    channel_value,
    per_sample_loss,
    per_sample_loss_gradient,
)
from models import ModelOutput, PairwiseModel
from stats import LossStats, batch_moments, merge_across_workers, select_alpha, update, write_ema_trace, z_scores
from weighting import check_mean_weight, should_update_stats, weights_from_z

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

EPOCH_COLUMNS = [
    "epoch", "clean_rmse", "noisy_rmse", "val_rmse", "mean_weight",
    "noisy_truth_rmse", "val_energy_rmse", "warnings",
]


@dataclass
class EpochRecord:
    epoch: int
    train_rmse_clean_subset: float
    train_rmse_noisy_subset: float
    validation_rmse: float
    mean_weight: float
    warnings: int
    noisy_truth_rmse: float = math.nan
    validation_energy_rmse: float = math.nan


@dataclass
class SampleRecord:
    sample_id: int
    epoch: int
    loss: float
    z_score: Optional[float]
    weight: float


@dataclass
class EmaTracePoint:
    batch_index: int
    mu: float
    sigma: float
    batch_mean: float


@dataclass
class MergeRecord:
    epoch: int
    worker: int
    worker_mu: float
    worker_var: float
    merged_mu: float
    merged_var: float


@dataclass
class TrainingLog:
    epochs: List[EpochRecord] = field(default_factory=list)
    samples: List[SampleRecord] = field(default_factory=list)
    ema_trace: List[EmaTracePoint] = field(default_factory=list)
    merges: List[MergeRecord] = field(default_factory=list)
    final_weights: Dict[int, float] = field(default_factory=dict)
    alpha: Optional[float] = None
    parameter_history: List[np.ndarray] = field(default_factory=list)
    epochs_trained: int = 0


@dataclass
class OptimizerState:
    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> "OptimizerState":
        return cls(step=0, first_moment=np.zeros(size), second_moment=np.zeros(size))


@dataclass
class EvaluationResult:
    energy_rmse: float
    force_rmse: float
    per_sample_errors: Dict[int, float]


@dataclass
class SubsetErrors:
    clean_rmse: float
    noisy_rmse: float
    noisy_truth_rmse: float


def scheduled_learning_rate(config: RunConfig, step: int, total_steps: int) -> float:
    """Rate for optimizer step ``step`` (0-based) of ``total_steps``; cosine decays to lr_final_fraction."""
    if config.lr_schedule == LearningRateSchedule.CONSTANT or total_steps <= 1:
        return config.learning_rate
    progress = min(step, total_steps - 1) / (total_steps - 1)
    floor = config.learning_rate * config.lr_final_fraction
    return floor + 0.5 * (config.learning_rate - floor) * (1.0 + math.cos(math.pi * progress))


def optimizer_step(
    parameters: np.ndarray,
    gradients: np.ndarray,
    state: OptimizerState,
    config: RunConfig,
    learning_rate: Optional[float] = None,
) -> Tuple[np.ndarray, OptimizerState]:
    if parameters.shape != gradients.shape:
        raise ContractViolation(f"parameter shape {parameters.shape} != gradient shape {gradients.shape}")
    if not np.all(np.isfinite(gradients)):
        raise NonFiniteError("non-finite gradient")
    lr = config.learning_rate if learning_rate is None else learning_rate
    if config.optimizer == OptimizerKind.SGD:
        return parameters - lr * gradients, OptimizerState(state.step + 1, state.first_moment, state.second_moment)
    step = state.step + 1
    m = ADAM_BETA1 * state.first_moment + (1.0 - ADAM_BETA1) * gradients
    v = ADAM_BETA2 * state.second_moment + (1.0 - ADAM_BETA2) * gradients * gradients
    m_hat = m / (1.0 - ADAM_BETA1 ** step)
    v_hat = v / (1.0 - ADAM_BETA2 ** step)
    updated = parameters - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPSILON)
    return updated, OptimizerState(step, m, v)


def _as_view(sample: Union[LabeledSample, TrainingSample]) -> TrainingSample:
    return sample.training_view() if isinstance(sample, LabeledSample) else sample


def _accumulate_gradient(
    model: PairwiseModel,
    samples: Sequence[TrainingSample],
    outputs: Sequence[ModelOutput],
    losses: Sequence[PerSampleLoss],
    weights: np.ndarray,
    spec: CompositeLossSpec,
) -> Tuple[float, np.ndarray]:
    n = len(samples)
    grad = np.zeros_like(model.parameters)
    for sample, output, weight in zip(samples, outputs, weights):
        upstream = per_sample_loss_gradient(output, sample, spec).scaled(weight * weight / n)
        grad += model.backward(sample.positions, upstream)
    return bootstrapped_batch_loss(losses, weights), grad


def batch_gradient(
    model: PairwiseModel,
    samples: Sequence[Union[LabeledSample, TrainingSample]],
    weights: Sequence[float],
    spec: CompositeLossSpec,
) -> Tuple[float, np.ndarray, List[PerSampleLoss]]:
    """Squared-weight batch loss, its parameter gradient, and the unweighted per-sample losses."""
    views = [_as_view(s) for s in samples]
    if len(views) != len(weights):
        raise ContractViolation(f"{len(views)} samples but {len(weights)} weights")
    outputs = [model.forward(s.positions) for s in views]
    losses = [per_sample_loss(o, s, spec) for o, s in zip(outputs, views)]
    value, grad = _accumulate_gradient(model, views, outputs, losses, np.asarray(weights, dtype=float), spec)
    return value, grad, losses


def evaluate(
    model: PairwiseModel, samples: Sequence[Union[LabeledSample, TrainingSample]], spec: CompositeLossSpec
) -> EvaluationResult:
    views = [_as_view(s) for s in samples]
    if not views:
        return EvaluationResult(energy_rmse=math.nan, force_rmse=math.nan, per_sample_errors={})
    energy_sq = []
    force_sq_sum = 0.0
    force_count = 0
    per_sample = {}
    for sample in views:
        output = model.forward(sample.positions)
        energy_sq.append((output.energy - sample.energy) ** 2)
        diff = output.forces - sample.forces
        force_sq_sum += float(np.sum(diff ** 2))
        force_count += diff.size
        per_sample[sample.id] = math.sqrt(float(np.mean(diff ** 2))) if diff.size else 0.0
    return EvaluationResult(
        energy_rmse=math.sqrt(float(np.mean(energy_sq))),
        force_rmse=math.sqrt(force_sq_sum / force_count) if force_count else 0.0,
        per_sample_errors=per_sample,
    )


def evaluate_subsets(model: PairwiseModel, samples: Sequence[LabeledSample], spec: CompositeLossSpec) -> SubsetErrors:
    """Training error split by hidden provenance, plus corrupted-sample error against the hidden truth."""
    clean = [s for s in samples if s.provenance == Provenance.CLEAN]
    noisy = [s for s in samples if s.provenance == Provenance.CORRUPTED]
    return SubsetErrors(
        clean_rmse=evaluate(model, clean, spec).force_rmse,
        noisy_rmse=evaluate(model, noisy, spec).force_rmse,
        noisy_truth_rmse=evaluate(model, [s.truth_view() for s in noisy], spec).force_rmse,
    )


class SubsetMonitor:
    """Evaluation-side observer; the training loop only hands it the current model."""

    def __init__(self, train_set: Sequence[LabeledSample], validation_set: Sequence[LabeledSample], spec: CompositeLossSpec):
        self.train_set = list(train_set)
        self.validation_truth = [s.truth_view() for s in validation_set]
        self.spec = spec

    def observe(self, model: PairwiseModel) -> Tuple[SubsetErrors, EvaluationResult]:
        subsets = evaluate_subsets(model, self.train_set, self.spec)
        validation = evaluate(model, self.validation_truth, self.spec)
        return subsets, validation


def _snapshot_epochs(config: RunConfig) -> set:
    epochs = {e for e in config.snapshot_epochs if 0 <= e < config.epochs}
    if config.snapshot_every > 0:
        epochs.update(e for e in range(config.epochs) if (e + 1) % config.snapshot_every == 0)
    epochs.add(config.epochs - 1)
    return epochs


def train(
    model: PairwiseModel,
    train_set: Sequence[LabeledSample],
    validation_set: Sequence[LabeledSample],
    config: RunConfig,
    static_weights: Optional[Dict[int, float]] = None,
    track_parameters: bool = False,
) -> Tuple[PairwiseModel, TrainingLog]:
    train_ids = {s.id for s in train_set}
    if train_ids & {s.id for s in validation_set}:
        raise ContractViolation("training and validation sets share sample ids")
    views = [s.training_view() for s in train_set]
    monitor = SubsetMonitor(train_set, validation_set, config.loss_spec)
    log = TrainingLog()
    if config.epochs == 0 or not views:
        return model, log

    spec = config.loss_spec
    policy = config.weight_policy
    workers = config.workers
    shuffle_rng = SeedStreams(config.seed).generator("shuffle")
    batches_per_epoch = math.ceil(len(views) / config.batch_size)
    alpha = config.ema_alpha if config.ema_alpha is not None else select_alpha(math.ceil(batches_per_epoch / workers))
    log.alpha = alpha
    worker_stats = [LossStats(alpha=alpha) for _ in range(workers)]
    opt_state = OptimizerState.zeros(model.parameters.size)
    fixed = None
    if static_weights is not None:
        fixed = np.array([static_weights.get(v.id, 1.0) for v in views], dtype=float)
    snapshots = _snapshot_epochs(config)
    total_steps = batches_per_epoch * config.epochs
    global_batch = 0
    latest: Dict[int, Tuple[float, Optional[float], float]] = {}

    for epoch in range(config.epochs):
        epoch_weights: List[float] = []
        warnings = 0
        for batch_index, indices in enumerate(make_batches(len(views), config.batch_size, shuffle_rng)):
            worker = batch_index % workers
            batch = [views[k] for k in indices]
            outputs = [model.forward(s.positions) for s in batch]
            losses = [per_sample_loss(o, s, spec) for o, s in zip(outputs, batch)]
            tracked = np.array([channel_value(l, config.loss_channel) for l in losses])
            for sample, loss, value in zip(batch, losses, tracked):
                if not (math.isfinite(loss.total) and math.isfinite(value)):
                    raise NonFiniteError(f"non-finite loss for sample {sample.id} at epoch {epoch}", sample.id)

            z = None
            if policy is not None:
                stats = worker_stats[worker]
                if not stats.initialized or should_update_stats(epoch, batch_index // workers, policy, config.epochs):
                    mean, var = batch_moments(tracked)
                    stats = update(stats, mean, var)
                    worker_stats[worker] = stats
                    if worker == 0:
                        log.ema_trace.append(EmaTracePoint(global_batch, stats.mu, stats.sigma, mean))
                z = z_scores(stats, tracked)
                weights = weights_from_z(z, policy.z_threshold)
                verdict = check_mean_weight(weights, policy)
                if verdict.warn:
                    warnings += 1
                    logger.warning("epoch %d batch %d: mean weight %.3f below floor %.3f",
                                   epoch, batch_index, verdict.mean, policy.warn_floor)
            else:
                weights = np.ones(len(batch))
            if fixed is not None:
                weights = weights * fixed[indices]

            _, grad = _accumulate_gradient(model, batch, outputs, losses, weights, spec)
            lr = scheduled_learning_rate(config, global_batch, total_steps)
            try:
                parameters, opt_state = optimizer_step(model.parameters, grad, opt_state, config, lr)
            except NonFiniteError as exc:
                raise NonFiniteError(f"{exc} in batch with samples {[s.id for s in batch]}") from exc
            model = model.with_parameters(parameters)
            if track_parameters:
                log.parameter_history.append(parameters.copy())

            epoch_weights.extend(weights.tolist())
            for k, sample in enumerate(batch):
                latest[sample.id] = (float(tracked[k]), None if z is None else float(z[k]), float(weights[k]))
            global_batch += 1

        if workers > 1 and policy is not None:
            # workers that saw no batch this run have nothing to contribute
            active = [(worker, stats) for worker, stats in enumerate(worker_stats) if stats.initialized]
            merged = merge_across_workers([stats for _, stats in active])
            for worker, stats in active:
                log.merges.append(MergeRecord(epoch, worker, stats.mu, stats.var, merged.mu, merged.var))
            logger.info("epoch %d: merged loss statistics mu=%.6g var=%.6g over %d of %d workers",
                        epoch, merged.mu, merged.var, len(active), workers)
            worker_stats = [merged] * workers

        if epoch % config.eval_every == 0 or epoch == config.epochs - 1:
            subsets, validation = monitor.observe(model)
            log.epochs.append(EpochRecord(
                epoch=epoch,
                train_rmse_clean_subset=subsets.clean_rmse,
                train_rmse_noisy_subset=subsets.noisy_rmse,
                validation_rmse=validation.force_rmse,
                mean_weight=float(np.mean(epoch_weights)),
                warnings=warnings,
                noisy_truth_rmse=subsets.noisy_truth_rmse,
                validation_energy_rmse=validation.energy_rmse,
            ))
        if epoch in snapshots:
            log.samples.extend(
                SampleRecord(sample_id=sid, epoch=epoch, loss=value[0], z_score=value[1], weight=value[2])
                for sid, value in sorted(latest.items())
            )
        log.epochs_trained += 1

    log.final_weights = {sid: value[2] for sid, value in sorted(latest.items())}
    return model, log


def _nan_to_none(value):
    return None if isinstance(value, float) and not math.isfinite(value) else value


def write_training_log(log: TrainingLog, run_dir: Path) -> List[Path]:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    written = []

    epochs = pd.DataFrame(
        [
            {
                "epoch": r.epoch,
                "clean_rmse": r.train_rmse_clean_subset,
                "noisy_rmse": r.train_rmse_noisy_subset,
                "val_rmse": r.validation_rmse,
                "mean_weight": r.mean_weight,
                "noisy_truth_rmse": r.noisy_truth_rmse,
                "val_energy_rmse": r.validation_energy_rmse,
                "warnings": r.warnings,
            }
            for r in log.epochs
        ],
        columns=EPOCH_COLUMNS,
    )
    epochs.to_csv(run_dir / "epochs.csv", index=False)
    written.append(run_dir / "epochs.csv")

    with open(run_dir / "samples.jsonl", "w", encoding="utf-8") as f:
        for record in log.samples:
            row = {key: _nan_to_none(value) for key, value in asdict(record).items()}
            f.write(json.dumps(row, separators=(",", ":")) + "\n")
    written.append(run_dir / "samples.jsonl")

    written.append(write_ema_trace([(p.batch_index, p.mu, p.sigma) for p in log.ema_trace], run_dir / "ema_trace.csv"))

    if log.merges:
        pd.DataFrame([asdict(m) for m in log.merges]).to_csv(run_dir / "merges.csv", index=False)
        written.append(run_dir / "merges.csv")
    return written
