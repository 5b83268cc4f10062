"""
Iterative refinement baseline.

Each cycle is a complete training run from a fresh initialization. Between
cycles every training sample is scored under the trained model and assigned
a fixed weight from whole-set loss statistics (no EMA); the next cycle trains
with those weights in the squared-weight loss.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from config import RefinementPlan, RefinementVariant
from core import ContractViolation, LabeledSample, split_train_validation
from loss import channel_value, per_sample_loss
from models import PairwiseModel, build_model
from stats import batch_moments, variance_floor
from trainer import TrainingLog, evaluate, train
from weighting import weights_from_z

logger = logging.getLogger(__name__)

ERROR_TABLE_COLUMNS = ["cycle", "median_force_rmse", "iqr_low", "iqr_high", "variant", "epochs_trained"]


@dataclass
class CycleRow:
    cycle: int
    median_force_rmse: float
    iqr_low: float
    iqr_high: float
    variant: RefinementVariant
    epochs_trained: int


@dataclass
class RefinementResult:
    models: List[PairwiseModel] = field(default_factory=list)
    weights: List[Dict[int, float]] = field(default_factory=list)
    rows: List[CycleRow] = field(default_factory=list)
    logs: List[TrainingLog] = field(default_factory=list)
    churn: List[int] = field(default_factory=list)


def median_iqr(values: Sequence[float]) -> Tuple[float, float, float]:
    if len(values) == 0:
        return math.nan, math.nan, math.nan
    low, median, high = np.percentile(np.asarray(values, dtype=float), [25.0, 50.0, 75.0])
    return float(median), float(low), float(high)


def static_weights_from_errors(losses: Sequence[float], z_t: float) -> List[float]:
    if len(losses) == 0:
        raise ContractViolation("static weights need at least one loss")
    mu, var = batch_moments(losses)
    sigma = max(math.sqrt(var), variance_floor(mu))
    z = (np.asarray(losses, dtype=float) - mu) / sigma
    return weights_from_z(z, z_t).tolist()


def low_weight_churn(previous: Dict[int, float], current: Dict[int, float], cutoff: float = 0.1) -> int:
    """Size of the symmetric difference between the low-weight id sets of two cycles."""
    before = {sid for sid, w in previous.items() if w < cutoff}
    after = {sid for sid, w in current.items() if w < cutoff}
    return len(before ^ after)


def _score(model: PairwiseModel, samples: Sequence[LabeledSample], plan: RefinementPlan) -> List[float]:
    spec = plan.inner_config.loss_spec
    channel = plan.inner_config.loss_channel
    scores = []
    for sample in samples:
        view = sample.training_view()
        scores.append(channel_value(per_sample_loss(model.forward(view.positions), view, spec), channel))
    return scores


def refine(dataset: Sequence[LabeledSample], plan: RefinementPlan) -> RefinementResult:
    inner = plan.inner_config
    train_set, validation_set = split_train_validation(dataset, inner.validation_fraction, inner.seed)
    validation_truth = [s.truth_view() for s in validation_set]
    variant = plan.variant
    result = RefinementResult()
    static = None
    epochs_total = 0

    for cycle in range(plan.cycles):
        config = inner
        if cycle == 0 and plan.early_stop_epoch is not None:
            config = inner.model_copy(update={"epochs": min(plan.early_stop_epoch, inner.epochs)})
        model = build_model(inner.model, inner.seed)
        model, log = train(model, train_set, validation_set, config, static_weights=static)
        epochs_total += log.epochs_trained

        scores = _score(model, train_set, plan)
        weights = dict(zip((s.id for s in train_set), static_weights_from_errors(scores, plan.z_threshold)))
        errors = evaluate(model, validation_truth, inner.loss_spec).per_sample_errors
        median, low, high = median_iqr(list(errors.values()))
        result.models.append(model)
        result.weights.append(weights)
        result.logs.append(log)
        result.rows.append(CycleRow(cycle, median, low, high, variant, epochs_total))

        churn = low_weight_churn(result.weights[-2], weights) if cycle > 0 else len(
            [w for w in weights.values() if w < 0.1]
        )
        result.churn.append(churn)
        logger.info("refinement cycle %d (%s): median val force RMSE %.6g, low-weight churn %d",
                    cycle, variant.value, median, churn)
        static = weights
    return result


def relative_change(medians: Sequence[float]) -> float:
    """|last - first| / first over per-cycle median validation errors."""
    if len(medians) == 0:
        raise ContractViolation("no refinement cycles to compare")
    first, last = float(medians[0]), float(medians[-1])
    if first > 0.0:
        return abs(last - first) / first
    return 0.0 if last == first else math.inf


def write_error_table(rows: Sequence[CycleRow], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [
            {
                "cycle": r.cycle,
                "median_force_rmse": r.median_force_rmse,
                "iqr_low": r.iqr_low,
                "iqr_high": r.iqr_high,
                "variant": RefinementVariant(r.variant).value,
                "epochs_trained": r.epochs_trained,
            }
            for r in rows
        ],
        columns=ERROR_TABLE_COLUMNS,
    )
    frame.to_csv(path, index=False)
    return path
