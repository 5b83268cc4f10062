"""
Run configuration models shared by every module.

All structured settings are pydantic models so that a run can be rebuilt from
the JSON stored in its manifest.
"""
import math
from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.special import ndtri

DEFAULT_OUTLIER_FRACTION = 0.10


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAPTIVE_MOMENTS = "adam"


class EnergyReduction(str, Enum):
    PER_ATOM_MSE = "per_atom_mse"
    TOTAL_MSE = "total_mse"


class ForceReduction(str, Enum):
    MSE_OVER_COMPONENTS = "mse_over_components"


class LearningRateSchedule(str, Enum):
    CONSTANT = "constant"
    COSINE = "cosine"


class LossChannel(str, Enum):
    """Which per-sample quantity feeds the loss statistics and z-scores."""
    TOTAL = "total"
    FORCE = "force"


class Activation(str, Enum):
    TANH = "tanh"
    SOFTPLUS = "softplus"


class ModelKind(str, Enum):
    PAIR_MLP = "pair_mlp"
    LINEAR_BASIS = "linear_basis"


class PotentialKind(str, Enum):
    LENNARD_JONES = "lennard-jones"
    DOUBLE_WELL = "double-well"


class NoiseMode(str, Enum):
    SYSTEMATIC_DIRECTIONAL = "systematic"
    RANDOM_GAUSSIAN = "gaussian"
    MULTIMODAL = "multimodal"


class CompositeLossSpec(BaseModel):
    lambda_energy: float = Field(default=1.0, ge=0.0, description="Energy channel weight")
    lambda_force: float = Field(default=10.0, ge=0.0, description="Force channel weight")
    lambda_aux: float = Field(default=0.0, ge=0.0, description="Auxiliary (stress-like) channel weight")
    energy_reduction: EnergyReduction = Field(default=EnergyReduction.PER_ATOM_MSE)
    force_reduction: ForceReduction = Field(default=ForceReduction.MSE_OVER_COMPONENTS)

    @model_validator(mode="after")
    def _some_channel_active(self):
        if max(self.lambda_energy, self.lambda_force, self.lambda_aux) <= 0.0:
            raise ValueError("at least one of lambda_energy, lambda_force, lambda_aux must be positive")
        return self


class UpdateSchedule(BaseModel):
    """Epoch -> update-every-k-batches. Period switches once at switch_fraction of the run."""
    early_period: int = Field(default=1, ge=1)
    late_period: int = Field(default=4, ge=1)
    switch_fraction: float = Field(default=0.5, ge=0.0, le=1.0)

    @classmethod
    def constant(cls, period: int = 1) -> "UpdateSchedule":
        return cls(early_period=period, late_period=period)

    def period(self, epoch: int, total_epochs: int) -> int:
        if epoch < self.switch_fraction * total_epochs:
            return self.early_period
        return self.late_period


class WeightPolicy(BaseModel):
    # z_threshold=inf is the "trust everything" sentinel: every weight is exactly 1
    model_config = ConfigDict(ser_json_inf_nan="constants")

    z_threshold: float = Field(default=3.0, description="z-score at which the weight crosses 0.5")
    warn_floor: float = Field(default=0.25, gt=0.0, lt=1.0, description="Minimum acceptable batch-mean weight")
    update_schedule: UpdateSchedule = Field(default_factory=UpdateSchedule)

    @field_validator("z_threshold")
    @classmethod
    def _threshold_not_nan(cls, value: float) -> float:
        if math.isnan(value):
            raise ValueError("z_threshold must not be NaN")
        return value


class ModelConfig(BaseModel):
    kind: ModelKind = Field(default=ModelKind.PAIR_MLP)
    cutoff: float = Field(default=4.0, gt=0.0, description="Pair cutoff radius in model length units")
    hidden_widths: List[int] = Field(default_factory=lambda: [16, 16])
    activation: Activation = Field(default=Activation.TANH)
    envelope_power: int = Field(default=2, ge=2, description="Exponent p of the (1-(r/rc)^2)^p envelope")
    input_scale: float = Field(default=1.0, gt=0.0, description="Distance multiplier applied before the network")
    basis_size: int = Field(default=16, ge=1, description="Gaussian radial functions in the linear basis model")
    basis_min: float = Field(default=0.8, ge=0.0)

    @field_validator("hidden_widths")
    @classmethod
    def _positive_widths(cls, widths: List[int]) -> List[int]:
        if any(w < 1 for w in widths):
            raise ValueError("hidden widths must be positive")
        return widths


class RunConfig(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    seed: int = Field(default=0)
    batch_size: int = Field(default=8, ge=1)
    epochs: int = Field(default=100, ge=0)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    lr_schedule: LearningRateSchedule = Field(default=LearningRateSchedule.CONSTANT)
    lr_final_fraction: float = Field(default=0.01, gt=0.0, le=1.0, description="Cosine schedule: final rate as a share of learning_rate")
    optimizer: OptimizerKind = Field(default=OptimizerKind.ADAPTIVE_MOMENTS)
    loss_spec: CompositeLossSpec = Field(default_factory=CompositeLossSpec)
    weight_policy: Optional[WeightPolicy] = Field(default=None, description="None means vanilla training")
    workers: int = Field(default=1, ge=1)
    validation_fraction: float = Field(default=0.15, gt=0.0, lt=1.0)
    loss_channel: LossChannel = Field(default=LossChannel.TOTAL)
    ema_alpha: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    model: ModelConfig = Field(default_factory=ModelConfig)
    snapshot_every: int = Field(default=0, ge=0, description="Per-sample snapshot cadence in epochs (0 = off)")
    snapshot_epochs: List[int] = Field(default_factory=list)
    eval_every: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _aux_needs_an_aux_model(self):
        # no ModelKind predicts an auxiliary quantity
        if self.loss_spec.lambda_aux > 0.0:
            raise ValueError("lambda_aux must be 0: no model emits an auxiliary output")
        return self

    @property
    def bootstrapping(self) -> bool:
        return self.weight_policy is not None


class NoiseSpec(BaseModel):
    fraction: float = Field(default=0.10, ge=0.0, lt=1.0, description="Share of samples whose labels are corrupted")
    force_noise_magnitude: Tuple[float, float] = Field(
        default=(1.5, 2.5), description="Range of per-sample RMS force perturbation (model units)"
    )
    energy_offset: Optional[float] = Field(default=None, description="Constant energy shift of corrupted samples")
    mode: NoiseMode = Field(default=NoiseMode.SYSTEMATIC_DIRECTIONAL)
    heavy_share: float = Field(default=0.12, ge=0.0, le=1.0, description="Multimodal: share of corrupted samples in the heavy mode")
    background_ratio: float = Field(default=0.1, ge=0.0, description="Multimodal: background RMS relative to the heavy mode")

    @field_validator("force_noise_magnitude")
    @classmethod
    def _ordered_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if low < 0.0 or high < low:
            raise ValueError("force_noise_magnitude must be a non-negative (low, high) range")
        return value


class RefinementVariant(str, Enum):
    VANILLA = "vanilla"
    EARLY_STOP = "early_stop"
    BOOTSTRAPPED = "bootstrapped"


def default_early_stop_epoch(total_epochs: int) -> int:
    """12% of the run, rounded half up, at least one epoch."""
    return max(1, int(math.floor(0.12 * total_epochs + 0.5)))


class RefinementPlan(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    cycles: int = Field(default=4, ge=1)
    z_threshold: float = Field(default_factory=lambda: float(ndtri(1.0 - DEFAULT_OUTLIER_FRACTION)))
    early_stop_epoch: Optional[int] = Field(default=None, ge=1)
    inner_config: RunConfig = Field(default_factory=RunConfig)

    @property
    def variant(self) -> RefinementVariant:
        if self.inner_config.bootstrapping:
            return RefinementVariant.BOOTSTRAPPED
        if self.early_stop_epoch is not None:
            return RefinementVariant.EARLY_STOP
        return RefinementVariant.VANILLA
