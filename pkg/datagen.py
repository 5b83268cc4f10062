"""
Synthetic clean datasets from analytic pair potentials, and controlled label corruption.

Corrupted samples keep their exact labels in ``truth_energy``/``truth_forces``
so evaluation can compare predictions with the unseen ground truth.
"""
import logging
from typing import List, Optional

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from config import NoiseMode, NoiseSpec, PotentialKind
from core import ConfigError, LabeledSample, Provenance, SeedStreams, half_up_count

logger = logging.getLogger(__name__)


class PairPotential:
    """Ground-truth energy and exact forces from a radial pair function."""

    # placement distance used when building reference geometries
    bond_length: float = 1.0

    def pair_energy(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def pair_derivative(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def energy_and_forces(self, positions: np.ndarray):
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        n = positions.shape[0]
        forces = np.zeros((n, 3))
        if n < 2:
            return 0.0, forces
        i, j = np.triu_indices(n, k=1)
        disp = positions[i] - positions[j]
        r = np.linalg.norm(disp, axis=1)
        pair_force = -(self.pair_derivative(r) / r)[:, None] * disp
        np.add.at(forces, i, pair_force)
        np.add.at(forces, j, -pair_force)
        return float(np.sum(self.pair_energy(r))), forces

    def energy(self, positions: np.ndarray) -> float:
        return self.energy_and_forces(positions)[0]


class LennardJones(PairPotential):
    def __init__(self, epsilon: float = 1.0, sigma: float = 1.0):
        self.epsilon = epsilon
        self.sigma = sigma
        self.bond_length = 2.0 ** (1.0 / 6.0) * sigma

    def pair_energy(self, r):
        s6 = (self.sigma / r) ** 6
        return 4.0 * self.epsilon * (s6 * s6 - s6)

    def pair_derivative(self, r):
        s6 = (self.sigma / r) ** 6
        return 4.0 * self.epsilon * (-12.0 * s6 * s6 + 6.0 * s6) / r


class DoubleWell(PairPotential):
    """eps * (((r - r0)/delta)^2 - 1)^2, minima at r0 - delta and r0 + delta."""

    def __init__(self, epsilon: float = 1.0, r0: float = 1.5, delta: float = 0.35):
        self.epsilon = epsilon
        self.r0 = r0
        self.delta = delta
        self.bond_length = r0 - delta

    def pair_energy(self, r):
        x = (r - self.r0) / self.delta
        return self.epsilon * (x * x - 1.0) ** 2

    def pair_derivative(self, r):
        x = (r - self.r0) / self.delta
        return 4.0 * self.epsilon * (x * x - 1.0) * x / self.delta


class SoftRepulsion(PairPotential):
    """exp(-(r/length)^2); its forces push every pair apart along the bond."""

    def __init__(self, length: float = 1.5):
        self.length = length
        self.bond_length = length

    def pair_energy(self, r):
        return np.exp(-((r / self.length) ** 2))

    def pair_derivative(self, r):
        return -2.0 * r / self.length ** 2 * np.exp(-((r / self.length) ** 2))


# one bias shared by every systematically corrupted sample
SYSTEMATIC_BIAS = SoftRepulsion()


POTENTIALS = {
    PotentialKind.LENNARD_JONES: LennardJones,
    PotentialKind.DOUBLE_WELL: DoubleWell,
}


def make_potential(kind: PotentialKind) -> PairPotential:
    return POTENTIALS[PotentialKind(kind)]()


def reference_geometry(potential: PairPotential, particles: int, rng: np.random.Generator) -> np.ndarray:
    """Grow a compact cluster one particle at a time, then relax it to a local minimum."""
    bond = potential.bond_length
    positions = [np.zeros(3)]
    while len(positions) < particles:
        anchor = positions[rng.integers(len(positions))]
        direction = rng.normal(size=3)
        candidate = anchor + bond * direction / np.linalg.norm(direction)
        if min(np.linalg.norm(candidate - p) for p in positions) >= 0.9 * bond:
            positions.append(candidate)
    start = np.array(positions)
    if particles < 2:
        return start

    def objective(flat):
        energy, forces = potential.energy_and_forces(flat.reshape(-1, 3))
        return energy, -forces.ravel()

    result = minimize(objective, start.ravel(), jac=True, method="L-BFGS-B")
    relaxed = result.x.reshape(-1, 3)
    return relaxed - relaxed.mean(axis=0)


def generate_clean(
    n: int,
    particles: int,
    potential: PotentialKind = PotentialKind.LENNARD_JONES,
    seed: int = 0,
    displacement: float = 0.05,
) -> List[LabeledSample]:
    if particles < 1:
        raise ConfigError("particles must be at least 1")
    if n == 0:
        return []
    streams = SeedStreams(seed)
    truth = make_potential(potential)
    base = reference_geometry(truth, particles, streams.generator("geometry"))
    rng = streams.generator("configurations")
    min_distance = 0.8 * truth.bond_length
    samples = []
    while len(samples) < n:
        rotation = Rotation.random(None, rng).as_matrix()
        positions = base @ rotation.T + rng.normal(scale=displacement, size=base.shape)
        if particles > 1:
            i, j = np.triu_indices(particles, k=1)
            if np.min(np.linalg.norm(positions[i] - positions[j], axis=1)) < min_distance:
                continue
        energy, forces = truth.energy_and_forces(positions)
        samples.append(LabeledSample(id=len(samples), positions=positions, energy_ref=energy, forces_ref=forces))
    logger.info("generated %d clean %s samples with %d particles", n, PotentialKind(potential).value, particles)
    return samples


def _rescale_to_rms(delta: np.ndarray, target: float) -> np.ndarray:
    rms = np.sqrt(np.mean(delta ** 2))
    if rms == 0.0:
        return delta
    return delta * (target / rms)


def _systematic_delta(positions: np.ndarray, magnitude: float) -> np.ndarray:
    # smooth in the geometry and rotation-equivariant; pair forces keep the net force at zero
    _, bias = SYSTEMATIC_BIAS.energy_and_forces(positions)
    return _rescale_to_rms(bias, magnitude)


def corrupt(samples: List[LabeledSample], spec: NoiseSpec, seed: int = 0) -> List[LabeledSample]:
    n = len(samples)
    n_corrupt = half_up_count(n, spec.fraction)
    if n_corrupt == 0:
        return list(samples)
    streams = SeedStreams(seed)
    rng = streams.generator("noise")
    chosen = set(rng.choice(n, size=n_corrupt, replace=False).tolist())
    low, high = spec.force_noise_magnitude
    heavy_count = half_up_count(n_corrupt, spec.heavy_share)
    heavy = set(rng.permutation(sorted(chosen))[:heavy_count].tolist()) if spec.mode == NoiseMode.MULTIMODAL else set()

    corrupted = []
    for index, sample in enumerate(samples):
        if index not in chosen:
            corrupted.append(sample)
            continue
        magnitude = rng.uniform(low, high)
        shape = sample.forces_ref.shape
        if spec.mode == NoiseMode.SYSTEMATIC_DIRECTIONAL:
            delta = _systematic_delta(sample.positions, magnitude)
        elif spec.mode == NoiseMode.RANDOM_GAUSSIAN:
            delta = rng.normal(scale=magnitude, size=shape)
        else:
            scale = magnitude if index in heavy else magnitude * spec.background_ratio
            delta = rng.normal(scale=scale, size=shape)
        energy = sample.energy_ref + (spec.energy_offset or 0.0)
        corrupted.append(LabeledSample(
            id=sample.id,
            positions=sample.positions,
            energy_ref=energy,
            forces_ref=sample.forces_ref + delta,
            aux_ref=sample.aux_ref,
            provenance=Provenance.CORRUPTED,
            truth_energy=sample.true_energy,
            truth_forces=sample.true_forces,
        ))
    logger.info("corrupted %d of %d samples (%s)", n_corrupt, n, spec.mode.value)
    return corrupted


def injected_force_rms(samples: List[LabeledSample]) -> Optional[float]:
    """RMS of the label perturbation over all corrupted force components."""
    deltas = [s.forces_ref - s.truth_forces for s in samples
              if s.provenance == Provenance.CORRUPTED and s.truth_forces is not None]
    if not deltas:
        return None
    return float(np.sqrt(np.mean(np.concatenate([d.ravel() for d in deltas]) ** 2)))
