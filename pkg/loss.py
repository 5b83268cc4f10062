"""
Composite per-sample loss and the squared-weight batch loss.

    L_i  = lambda_E * l_E,i + lambda_F * l_F,i + lambda_S * l_S,i
    L'   = (1 / N_B) * sum_i w_i^2 * L_i
"""
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from config import CompositeLossSpec, EnergyReduction, LossChannel
from core import ContractViolation, TrainingSample

__all__ = [
    "CompositeLossSpec",
    "PerSampleLoss",
    "OutputGradient",
    "per_sample_loss",
    "per_sample_loss_gradient",
    "bootstrapped_batch_loss",
    "soft_target_equivalence_check",
    "channel_value",
]


@dataclass(frozen=True)
class PerSampleLoss:
    total: float
    energy_term: float
    force_term: float
    aux_term: float = 0.0


@dataclass(frozen=True)
class OutputGradient:
    """Loss gradient w.r.t. a model output: d/dE (scalar) and d/dF (N x 3)."""
    energy: float
    forces: np.ndarray
    aux: float = 0.0

    def scaled(self, factor: float) -> "OutputGradient":
        return OutputGradient(energy=self.energy * factor, forces=self.forces * factor, aux=self.aux * factor)


def _check_shapes(prediction, sample: TrainingSample):
    forces = np.asarray(prediction.forces)
    if forces.shape != sample.forces.shape:
        raise ContractViolation(
            f"prediction forces {forces.shape} do not match sample {sample.id} forces {sample.forces.shape}"
        )


def _energy_scale(spec: CompositeLossSpec, n_particles: int) -> float:
    if spec.energy_reduction == EnergyReduction.PER_ATOM_MSE:
        return 1.0 / max(n_particles, 1)
    return 1.0


def per_sample_loss(prediction, sample: TrainingSample, spec: CompositeLossSpec) -> PerSampleLoss:
    _check_shapes(prediction, sample)
    scale = _energy_scale(spec, sample.n_particles)
    energy_term = ((prediction.energy - sample.energy) * scale) ** 2
    diff = np.asarray(prediction.forces) - sample.forces
    force_term = float(np.mean(diff ** 2)) if diff.size else 0.0
    aux_term = 0.0
    if sample.aux is not None and getattr(prediction, "aux", None) is not None:
        aux_term = (prediction.aux - sample.aux) ** 2
    total = spec.lambda_energy * energy_term + spec.lambda_force * force_term + spec.lambda_aux * aux_term
    return PerSampleLoss(total=total, energy_term=energy_term, force_term=force_term, aux_term=aux_term)


def per_sample_loss_gradient(prediction, sample: TrainingSample, spec: CompositeLossSpec) -> OutputGradient:
    _check_shapes(prediction, sample)
    scale = _energy_scale(spec, sample.n_particles)
    d_energy = spec.lambda_energy * 2.0 * (prediction.energy - sample.energy) * scale * scale
    diff = np.asarray(prediction.forces) - sample.forces
    d_forces = spec.lambda_force * 2.0 * diff / diff.size if diff.size else np.zeros_like(diff)
    d_aux = 0.0
    if sample.aux is not None and getattr(prediction, "aux", None) is not None:
        d_aux = spec.lambda_aux * 2.0 * (prediction.aux - sample.aux)
    return OutputGradient(energy=d_energy, forces=d_forces, aux=d_aux)


def channel_value(loss: PerSampleLoss, channel: LossChannel) -> float:
    """The quantity whose distribution is tracked for outlier detection."""
    if channel == LossChannel.FORCE:
        return loss.force_term
    return loss.total


def bootstrapped_batch_loss(per_sample: Sequence[PerSampleLoss], weights: Sequence[float]) -> float:
    if len(per_sample) != len(weights):
        raise ContractViolation(f"{len(per_sample)} losses but {len(weights)} weights")
    if len(per_sample) == 0:
        raise ContractViolation("empty batch")
    total = 0.0
    for loss, weight in zip(per_sample, weights):
        if not 0.0 <= weight <= 1.0:
            raise ContractViolation(f"weight {weight} outside [0, 1]")
        total += weight * weight * loss.total
    return total / len(per_sample)


def soft_target_equivalence_check(y_pred: float, y_ref: float, w: float) -> Tuple[float, float]:
    """Squared-weight error versus error against the soft target w*y_ref + (1-w)*y_pred.

    The prediction inside the soft target is treated as a constant.
    """
    lhs = w * w * (y_pred - y_ref) ** 2
    soft_target = w * y_ref + (1.0 - w) * y_pred
    rhs = (y_pred - soft_target) ** 2
    return lhs, rhs
