"""
Shared domain types, dataset file format and deterministic randomness.

Dataset files are JSON-lines: an optional ``{"__meta__": {...}}`` header
followed by one object per sample.  Provenance and hidden-truth labels are
stored in the file but only ``LabeledSample`` carries them; the trainer works
on ``TrainingSample`` views that have neither.
"""
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

META_KEY = "__meta__"
DEFAULT_META = {"length_unit": "sigma", "energy_unit": "epsilon", "format_version": 1}


class NRTError(Exception):
    """Base class for errors raised by this package."""


class DatasetFormatError(NRTError, ValueError):
    pass


class DatasetValidationError(NRTError, ValueError):
    pass


class ConfigError(NRTError, ValueError):
    pass


class ContractViolation(NRTError, ValueError):
    pass


class StatsStateError(NRTError, RuntimeError):
    pass


class ModelDomainError(NRTError, ValueError):
    pass


class NonFiniteError(NRTError, RuntimeError):
    def __init__(self, message: str, sample_id: Optional[int] = None):
        super().__init__(message)
        self.sample_id = sample_id


class IncompatibleRunsError(NRTError, ValueError):
    pass


class Provenance(str, Enum):
    CLEAN = "clean"
    CORRUPTED = "corrupted"


def _frozen_array(values: Any, shape_tail: Tuple[int, ...] = (3,)) -> np.ndarray:
    array = np.array(values, dtype=float).reshape((-1,) + shape_tail)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """What the training loop is allowed to see."""
    id: int
    positions: np.ndarray
    energy: float
    forces: np.ndarray
    aux: Optional[float] = None

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True, eq=False)
class LabeledSample:
    id: int
    positions: np.ndarray
    energy_ref: float
    forces_ref: np.ndarray
    aux_ref: Optional[float] = None
    provenance: Provenance = Provenance.CLEAN
    truth_energy: Optional[float] = None
    truth_forces: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "positions", _frozen_array(self.positions))
        object.__setattr__(self, "forces_ref", _frozen_array(self.forces_ref))
        object.__setattr__(self, "energy_ref", float(self.energy_ref))
        if self.truth_forces is not None:
            object.__setattr__(self, "truth_forces", _frozen_array(self.truth_forces))
        if self.forces_ref.shape[0] != self.positions.shape[0]:
            raise DatasetValidationError(
                f"force count mismatch for sample {self.id}: "
                f"{self.positions.shape[0]} particles, {self.forces_ref.shape[0]} force vectors"
            )
        if self.truth_forces is not None and self.truth_forces.shape != self.forces_ref.shape:
            raise DatasetValidationError(f"truth force count mismatch for sample {self.id}")

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def true_energy(self) -> float:
        return self.energy_ref if self.truth_energy is None else self.truth_energy

    @property
    def true_forces(self) -> np.ndarray:
        return self.forces_ref if self.truth_forces is None else self.truth_forces

    def training_view(self) -> TrainingSample:
        return TrainingSample(
            id=self.id,
            positions=self.positions,
            energy=self.energy_ref,
            forces=self.forces_ref,
            aux=self.aux_ref,
        )

    def truth_view(self) -> TrainingSample:
        """The sample as the re-evaluated reference method would label it."""
        return TrainingSample(
            id=self.id,
            positions=self.positions,
            energy=self.true_energy,
            forces=self.true_forces,
            aux=self.aux_ref,
        )

    def to_record(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {
            "id": self.id,
            "positions": self.positions.tolist(),
            "energy": self.energy_ref,
            "forces": self.forces_ref.tolist(),
            "aux": self.aux_ref,
            "provenance": self.provenance.value,
        }
        if self.truth_energy is not None:
            record["truth_energy"] = self.truth_energy
        if self.truth_forces is not None:
            record["truth_forces"] = self.truth_forces.tolist()
        return record


@dataclass(frozen=True)
class Batch:
    samples: Tuple[TrainingSample, ...]

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ContractViolation("a batch needs at least one sample")

    @property
    def size(self) -> int:
        return len(self.samples)


@dataclass
class Dataset:
    samples: List[LabeledSample]
    meta: Dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_META))


class SeedStreams:
    """One seed, independent named generators (init, shuffle, noise, split, ...)."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, name: str) -> np.random.Generator:
        key = zlib.crc32(name.encode("utf-8"))
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(key,)))


def _sample_from_record(record: Dict[str, Any], line_number: int) -> LabeledSample:
    try:
        positions = record["positions"]
        forces = record["forces"]
        if len(positions) != len(forces):
            raise DatasetValidationError(f"force count mismatch at line {line_number}")
        truth_forces = record.get("truth_forces")
        return LabeledSample(
            id=int(record["id"]),
            positions=positions,
            energy_ref=float(record["energy"]),
            forces_ref=forces,
            aux_ref=None if record.get("aux") is None else float(record["aux"]),
            provenance=Provenance(record.get("provenance", "clean")),
            truth_energy=record.get("truth_energy"),
            truth_forces=truth_forces,
        )
    except DatasetValidationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"malformed sample at line {line_number}: {exc}") from exc


def parse_dataset(lines: Iterable[str]) -> Dataset:
    samples: List[LabeledSample] = []
    meta = dict(DEFAULT_META)
    seen_ids = set()
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"invalid JSON at line {line_number}: {exc.msg}") from exc
        if not isinstance(record, dict):
            raise DatasetFormatError(f"expected an object at line {line_number}")
        if META_KEY in record:
            meta = dict(record[META_KEY])
            continue
        sample = _sample_from_record(record, line_number)
        if sample.id in seen_ids:
            raise DatasetValidationError(f"duplicate sample id {sample.id} at line {line_number}")
        seen_ids.add(sample.id)
        samples.append(sample)
    return Dataset(samples=samples, meta=meta)


def load_dataset(path: Path) -> List[LabeledSample]:
    return load_dataset_with_meta(path).samples


def load_dataset_with_meta(path: Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        dataset = parse_dataset(f)
    logger.info("loaded %d samples from %s", len(dataset.samples), path)
    return dataset


def serialize_dataset(samples: Sequence[LabeledSample], meta: Optional[Dict[str, Any]] = None) -> str:
    lines = [json.dumps({META_KEY: meta if meta is not None else DEFAULT_META}, separators=(",", ":"))]
    lines.extend(json.dumps(s.to_record(), separators=(",", ":")) for s in samples)
    return "\n".join(lines) + "\n"


def save_dataset(samples: Sequence[LabeledSample], path: Path, meta: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_dataset(samples, meta), encoding="utf-8")
    return path


def half_up_count(n: int, fraction: float) -> int:
    """fraction * n rounded half up."""
    return int(math.floor(fraction * n + 0.5))


def validation_size(n: int, fraction: float) -> int:
    return half_up_count(n, fraction)


def split_train_validation(
    samples: Sequence[LabeledSample], fraction: float, seed: int
) -> Tuple[List[LabeledSample], List[LabeledSample]]:
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in (0, 1), got {fraction}")
    if len(samples) == 0:
        raise ContractViolation("cannot split an empty dataset")
    order = SeedStreams(seed).generator("split").permutation(len(samples))
    n_validation = validation_size(len(samples), fraction)
    validation = [samples[i] for i in order[:n_validation]]
    train = [samples[i] for i in order[n_validation:]]
    return train, validation


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    order = rng.permutation(n)
    return [order[start:start + batch_size] for start in range(0, n, batch_size)]
