"""
Per-sample confidence weights from z-scores.

    w(z) = 1/2 * [1 + erf((z_t - z) / sqrt(2))]

i.e. the standard normal CDF evaluated at z_t - z.
"""
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erf, ndtri

from config import UpdateSchedule, WeightPolicy
from core import ConfigError, ContractViolation
from stats import LossStats, z_scores

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)

__all__ = [
    "WeightPolicy",
    "UpdateSchedule",
    "MeanWeightVerdict",
    "weight_from_z",
    "weights_from_z",
    "weights_for_batch",
    "check_mean_weight",
    "should_update_stats",
    "threshold_for_outlier_fraction",
]


@dataclass(frozen=True)
class MeanWeightVerdict:
    ok: bool
    mean: float

    @property
    def warn(self) -> bool:
        return not self.ok


def weight_from_z(z: float, z_t: float) -> float:
    return float(0.5 * (1.0 + erf((z_t - z) / SQRT2)))


def weights_from_z(z: np.ndarray, z_t: float) -> np.ndarray:
    return 0.5 * (1.0 + erf((z_t - np.asarray(z, dtype=float)) / SQRT2))


def weights_for_batch(losses: Sequence[float], stats: LossStats, policy: WeightPolicy) -> np.ndarray:
    return weights_from_z(z_scores(stats, losses), policy.z_threshold)


def check_mean_weight(weights: Sequence[float], policy: WeightPolicy) -> MeanWeightVerdict:
    values = np.asarray(weights, dtype=float)
    if values.size == 0:
        raise ContractViolation("check_mean_weight needs at least one weight")
    mean = float(values.mean())
    # the floor itself is acceptable
    return MeanWeightVerdict(ok=mean >= policy.warn_floor, mean=mean)


def should_update_stats(epoch: int, batch_index: int, policy: WeightPolicy, total_epochs: int) -> bool:
    if total_epochs < 1:
        raise ConfigError(f"total_epochs must be at least 1, got {total_epochs}")
    period = policy.update_schedule.period(epoch, total_epochs)
    return batch_index % period == 0


def threshold_for_outlier_fraction(fraction: float) -> float:
    """z_t that flags the top ``fraction`` of a standard normal."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"outlier fraction must lie in (0, 1), got {fraction}")
    return float(ndtri(1.0 - fraction))
