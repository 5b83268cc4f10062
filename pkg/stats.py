"""
Running Gaussian model of the per-sample loss distribution.

The mean and variance of the loss are tracked with exponential moving
averages of batch moments:

    mu_b     = (1 - alpha) * mu_{b-1}     + alpha * mean(batch)
    sigma2_b = (1 - alpha) * sigma2_{b-1} + alpha * var(batch)

``LossStats`` is a value type; ``update`` and ``merge_across_workers`` return
new instances.
"""
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd

from core import ConfigError, ContractViolation, StatsStateError

logger = logging.getLogger(__name__)

# long-epoch decay, expressed as the share of state retained per batch
LONG_EPOCH_RETENTION = 0.99
LONG_EPOCH_BATCHES = 100


@dataclass(frozen=True)
class LossStats:
    alpha: float
    mu: float = math.nan
    var: float = math.nan
    batches_seen: int = 0
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"EMA decay alpha must lie in (0, 1], got {self.alpha}")
        if self.initialized and self.var < 0.0:
            raise ContractViolation("tracked variance became negative")

    @property
    def sigma(self) -> float:
        self._require_initialized()
        return math.sqrt(self.var)

    def _require_initialized(self):
        if not self.initialized:
            raise StatsStateError("loss statistics queried before the first update")


def select_alpha(batches_per_epoch: int) -> float:
    """EMA rate whose memory spans roughly one epoch.

    After ``n`` batches the previous state keeps 1% of its weight. Beyond 100
    batches per epoch the rate is fixed so that 99% of the state is retained
    per batch.
    """
    n = max(int(batches_per_epoch), 1)
    if n > LONG_EPOCH_BATCHES:
        return 1.0 - LONG_EPOCH_RETENTION
    return 1.0 - 0.01 ** (1.0 / n)


def batch_moments(losses: Sequence[float]) -> Tuple[float, float]:
    values = np.asarray(losses, dtype=float)
    if values.size == 0:
        raise ContractViolation("batch_moments needs at least one loss")
    mean = float(values.mean())
    # population variance, zero for a singleton batch
    variance = float(np.mean((values - mean) ** 2))
    return mean, variance


def update(stats: LossStats, batch_mean: float, batch_var: float) -> LossStats:
    if batch_var < 0.0:
        raise ContractViolation(f"batch variance must be non-negative, got {batch_var}")
    if not stats.initialized:
        return replace(stats, mu=float(batch_mean), var=float(batch_var),
                       batches_seen=stats.batches_seen + 1, initialized=True)
    alpha = stats.alpha
    return replace(
        stats,
        mu=(1.0 - alpha) * stats.mu + alpha * batch_mean,
        var=(1.0 - alpha) * stats.var + alpha * batch_var,
        batches_seen=stats.batches_seen + 1,
    )


def variance_floor(mu: float) -> float:
    """Smallest sigma used in z-scores; keeps z finite when the fit is perfect."""
    return 1e-12 * max(abs(mu), 1.0) + 1e-30


def z_score(stats: LossStats, loss: float) -> float:
    stats._require_initialized()
    return (loss - stats.mu) / max(math.sqrt(stats.var), variance_floor(stats.mu))


def z_scores(stats: LossStats, losses: Sequence[float]) -> np.ndarray:
    stats._require_initialized()
    sigma = max(math.sqrt(stats.var), variance_floor(stats.mu))
    return (np.asarray(losses, dtype=float) - stats.mu) / sigma


def merge_across_workers(stats_list: Sequence[LossStats]) -> LossStats:
    """Plain average of worker statistics; the result replaces every worker's state."""
    if len(stats_list) == 0:
        raise ContractViolation("merge_across_workers needs at least one worker")
    alphas = {s.alpha for s in stats_list}
    if len(alphas) != 1:
        raise ConfigError(f"workers disagree on EMA decay: {sorted(alphas)}")
    for s in stats_list:
        s._require_initialized()
    # sorted summation makes the result exactly independent of worker order
    mus = sorted(s.mu for s in stats_list)
    variances = sorted(s.var for s in stats_list)
    count = len(stats_list)
    return LossStats(
        alpha=stats_list[0].alpha,
        mu=math.fsum(mus) / count,
        var=math.fsum(variances) / count,
        batches_seen=sum(s.batches_seen for s in stats_list),
        initialized=True,
    )


def write_ema_trace(trace: Sequence[Tuple[int, float, float]], path: Path) -> Path:
    """Writes (batch_index, mu, sigma) rows."""
    path = Path(path)
    frame = pd.DataFrame(list(trace), columns=["batch_index", "mu", "sigma"])
    frame.to_csv(path, index=False)
    return path


def trace_jumps_within_bound(mus: List[float], batch_means: List[float], alpha: float, slack: float = 1e-12) -> bool:
    """True when every step obeys |mu_b - mu_{b-1}| <= alpha * |batch_mean_b - mu_{b-1}|."""
    for previous, current, batch_mean in zip(mus[:-1], mus[1:], batch_means[1:]):
        bound = alpha * abs(batch_mean - previous)
        if abs(current - previous) > bound + slack * max(1.0, abs(previous)):
            return False
    return True
