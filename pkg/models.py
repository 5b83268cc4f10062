"""
Pairwise energy/force regression models with analytic gradients.

Energy is a sum over pairs within the cutoff,

    E = sum_{i<j} g(r_ij) * u_theta(r_ij),    g(r) = (1 - (r/rc)^2)^p,

and forces are -dE/dx by the chain rule. ``backward`` differentiates a loss
that depends on both E and F, so it needs d u/d theta and d u'/d theta
(the force path is a second derivative of the network).
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from config import Activation, ModelConfig, ModelKind
from core import ModelDomainError, SeedStreams
from loss import OutputGradient

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ModelOutput:
    energy: float
    forces: np.ndarray
    aux: Optional[float] = None


def _activation(kind: Activation, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Value, first and second derivative."""
    if kind == Activation.TANH:
        a = np.tanh(z)
        a1 = 1.0 - a * a
        return a, a1, -2.0 * a * a1
    a = np.logaddexp(0.0, z)
    a1 = expit(z)
    return a, a1, a1 * (1.0 - a1)


class ScalarMLP:
    """Small fully connected network R -> R with forward-mode slope and reverse-mode parameter gradients."""

    def __init__(self, hidden_widths: Sequence[int], activation: Activation, input_scale: float = 1.0):
        self.sizes = [1] + list(hidden_widths) + [1]
        self.activation = activation
        self.input_scale = input_scale
        self.shapes = [(self.sizes[k + 1], self.sizes[k]) for k in range(len(self.sizes) - 1)]

    @property
    def n_parameters(self) -> int:
        return sum(out * inp + out for out, inp in self.shapes)

    def initial_parameters(self, rng: np.random.Generator) -> np.ndarray:
        chunks = []
        for out, inp in self.shapes:
            bound = inp ** -0.5
            chunks.append(rng.uniform(-bound, bound, size=out * inp + out))
        return np.concatenate(chunks)

    def unpack(self, theta: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        layers = []
        offset = 0
        for out, inp in self.shapes:
            weight = theta[offset:offset + out * inp].reshape(out, inp)
            offset += out * inp
            bias = theta[offset:offset + out]
            offset += out
            layers.append((weight, bias))
        return layers

    def value_and_slope(self, theta: np.ndarray, r: np.ndarray):
        """u(r), du/dr and the cache needed by ``parameter_gradient``."""
        layers = self.unpack(theta)
        h = r[:, None] * self.input_scale
        dh = np.full_like(h, self.input_scale)
        cache = []
        for weight, bias in layers[:-1]:
            z = h @ weight.T + bias
            slope = dh @ weight.T
            a, a1, a2 = _activation(self.activation, z)
            cache.append((h, dh, a1, a2, slope))
            h, dh = a, a1 * slope
        weight_out, bias_out = layers[-1]
        u = (h @ weight_out.T + bias_out)[:, 0]
        du = (dh @ weight_out.T)[:, 0]
        return u, du, (cache, h, dh)

    def parameter_gradient(self, theta: np.ndarray, cache, u_adjoint: np.ndarray, du_adjoint: np.ndarray) -> np.ndarray:
        """sum_p u_adjoint[p] * du_p/dtheta + du_adjoint[p] * d(u'_p)/dtheta."""
        layers = self.unpack(theta)
        hidden_cache, h, dh = cache
        p = u_adjoint[:, None]
        q = du_adjoint[:, None]
        weight_out, _ = layers[-1]
        grads = [(p.T @ h + q.T @ dh, p.sum(axis=0))]
        h_adj = p @ weight_out
        dh_adj = q @ weight_out
        for (weight, _), (h_in, dh_in, a1, a2, slope) in zip(reversed(layers[:-1]), reversed(hidden_cache)):
            slope_adj = a1 * dh_adj
            z_adj = a1 * h_adj + a2 * slope * dh_adj
            grads.append((z_adj.T @ h_in + slope_adj.T @ dh_in, z_adj.sum(axis=0)))
            h_adj = z_adj @ weight
            dh_adj = slope_adj @ weight
        grads.reverse()
        return np.concatenate([np.concatenate([gw.ravel(), gb.ravel()]) for gw, gb in grads])


class PairwiseModel:
    """Shared pair geometry, envelope and force assembly; subclasses supply the radial function."""

    kind: ModelKind

    def __init__(self, config: ModelConfig, parameters: np.ndarray):
        self.config = config
        self.cutoff = config.cutoff
        self.parameters = np.array(parameters, dtype=float)

    # radial function hooks
    def _radial(self, r: np.ndarray):
        raise NotImplementedError

    def _radial_gradient(self, r: np.ndarray, cache, u_adjoint: np.ndarray, du_adjoint: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def with_parameters(self, parameters: np.ndarray) -> "PairwiseModel":
        return type(self)(self.config, parameters)

    def _envelope(self, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        power = self.config.envelope_power
        x = r / self.cutoff
        base = 1.0 - x * x
        g = base ** power
        dg = power * base ** (power - 1) * (-2.0 * x / self.cutoff)
        return g, dg

    def _pairs(self, positions: np.ndarray):
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        i, j = np.triu_indices(positions.shape[0], k=1)
        disp = positions[i] - positions[j]
        r = np.sqrt(np.einsum("pk,pk->p", disp, disp))
        if np.any(r <= 0.0):
            raise ModelDomainError("coincident particles: pairwise distance is zero")
        inside = r < self.cutoff
        return positions.shape[0], i[inside], j[inside], disp[inside], r[inside]

    def forward(self, positions: np.ndarray) -> ModelOutput:
        n, i, j, disp, r = self._pairs(positions)
        forces = np.zeros((n, 3))
        if r.size == 0:
            return ModelOutput(energy=0.0, forces=forces)
        u, du, _ = self._radial(r)
        g, dg = self._envelope(r)
        dphi = dg * u + g * du
        pair_force = -(dphi / r)[:, None] * disp
        np.add.at(forces, i, pair_force)
        np.add.at(forces, j, -pair_force)
        return ModelOutput(energy=float(np.sum(g * u)), forces=forces)

    def backward(self, positions: np.ndarray, upstream: OutputGradient) -> np.ndarray:
        n, i, j, disp, r = self._pairs(positions)
        if r.size == 0:
            return np.zeros_like(self.parameters)
        _, _, cache = self._radial(r)
        g, dg = self._envelope(r)
        b = np.asarray(upstream.forces, dtype=float).reshape(n, 3)
        unit = disp / r[:, None]
        # dL/d(phi') for each pair: F_i = -phi' e_ij, F_j = +phi' e_ij
        c = np.einsum("pk,pk->p", b[j] - b[i], unit)
        u_adjoint = upstream.energy * g + c * dg
        du_adjoint = c * g
        return self._radial_gradient(r, cache, u_adjoint, du_adjoint)


class PairPotentialModel(PairwiseModel):
    kind = ModelKind.PAIR_MLP

    def __init__(self, config: ModelConfig, parameters: np.ndarray):
        super().__init__(config, parameters)
        self.network = ScalarMLP(config.hidden_widths, config.activation, config.input_scale)
        if self.parameters.size != self.network.n_parameters:
            raise ValueError(f"expected {self.network.n_parameters} parameters, got {self.parameters.size}")

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "PairPotentialModel":
        network = ScalarMLP(config.hidden_widths, config.activation, config.input_scale)
        return cls(config, network.initial_parameters(rng))

    def _radial(self, r):
        return self.network.value_and_slope(self.parameters, r)

    def _radial_gradient(self, r, cache, u_adjoint, du_adjoint):
        return self.network.parameter_gradient(self.parameters, cache, u_adjoint, du_adjoint)


class LinearBasisModel(PairwiseModel):
    """u(r) = sum_k theta_k exp(-((r - c_k)/w)^2): energy is linear in the parameters."""

    kind = ModelKind.LINEAR_BASIS

    def __init__(self, config: ModelConfig, parameters: np.ndarray):
        super().__init__(config, parameters)
        self.centers = np.linspace(config.basis_min, config.cutoff, config.basis_size)
        spacing = (config.cutoff - config.basis_min) / max(config.basis_size - 1, 1)
        self.width = spacing if spacing > 0 else 1.0
        if self.parameters.size != config.basis_size:
            raise ValueError(f"expected {config.basis_size} parameters, got {self.parameters.size}")

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "LinearBasisModel":
        bound = config.basis_size ** -0.5
        return cls(config, rng.uniform(-bound, bound, size=config.basis_size))

    def _basis(self, r):
        offset = (r[:, None] - self.centers[None, :]) / self.width
        basis = np.exp(-offset * offset)
        return basis, -2.0 * offset / self.width * basis

    def _radial(self, r):
        basis, dbasis = self._basis(r)
        return basis @ self.parameters, dbasis @ self.parameters, (basis, dbasis)

    def _radial_gradient(self, r, cache, u_adjoint, du_adjoint):
        basis, dbasis = cache
        return u_adjoint @ basis + du_adjoint @ dbasis


MODEL_CLASSES = {
    ModelKind.PAIR_MLP: PairPotentialModel,
    ModelKind.LINEAR_BASIS: LinearBasisModel,
}


def build_model(config: ModelConfig, seed: int) -> PairwiseModel:
    rng = SeedStreams(seed).generator("init")
    return MODEL_CLASSES[config.kind].initialize(config, rng)


def forward(model: PairwiseModel, positions: np.ndarray) -> ModelOutput:
    return model.forward(positions)


def backward(model: PairwiseModel, positions: np.ndarray, upstream: OutputGradient) -> np.ndarray:
    return model.backward(positions, upstream)


def numerical_gradient(func: Callable[[np.ndarray], float], x0: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x0 = np.asarray(x0, dtype=float)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    for k in range(x0.size):
        x = x0.copy().reshape(-1)
        x[k] = x0.reshape(-1)[k] + eps
        f_plus = func(x.reshape(x0.shape))
        x[k] = x0.reshape(-1)[k] - eps
        f_minus = func(x.reshape(x0.shape))
        flat[k] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def numerical_forces(energy: Callable[[np.ndarray], float], positions: np.ndarray, step: float = 1e-5, stencil: int = 3) -> np.ndarray:
    """-dE/dx by central differences; ``stencil=5`` uses the fourth-order formula."""
    positions = np.asarray(positions, dtype=float)
    if stencil == 3:
        return -numerical_gradient(energy, positions, step)
    grad = np.zeros_like(positions)
    for index in np.ndindex(positions.shape):
        values = []
        for k in (-2, -1, 1, 2):
            shifted = positions.copy()
            shifted[index] += k * step
            values.append(energy(shifted))
        grad[index] = (values[0] - 8.0 * values[1] + 8.0 * values[2] - values[3]) / (12.0 * step)
    return -grad


def forces_consistency_check(model: PairwiseModel, positions: np.ndarray, step: float = 1e-5) -> float:
    positions = np.asarray(positions, dtype=float)
    analytic = model.forward(positions).forces
    numeric = numerical_forces(lambda x: model.forward(x).energy, positions, step)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)))


def save_checkpoint(model: PairwiseModel, path: Path) -> Path:
    path = Path(path)
    payload = {
        "config": json.loads(model.config.model_dump_json()),
        "parameters": model.parameters.tolist(),
    }
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


def load_checkpoint(path: Path) -> PairwiseModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    config = ModelConfig.model_validate(payload["config"])
    return MODEL_CLASSES[config.kind](config, np.array(payload["parameters"], dtype=float))
