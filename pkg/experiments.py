"""
Experiment orchestration: run directories, manifests, sweeps and reports.

A run directory holds everything needed to inspect and replay one command:

    config.json       resolved RunConfig (or RefinementPlan)
    checkpoint.json   trained parameters
    epochs.csv        per-epoch clean/noisy/validation curves
    samples.jsonl     per-sample loss, z-score and weight snapshots
    ema_trace.csv     tracked loss mean/sigma of worker 0
    merges.csv        end-of-epoch worker merges (workers > 1)
    summary.json      final metrics
    manifest.json     command, arguments, seed and sha256 of inputs/outputs
"""
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from pydantic import BaseModel, Field

from config import (
    CompositeLossSpec,
    LearningRateSchedule,
    LossChannel,
    NoiseSpec,
    PotentialKind,
    RefinementPlan,
    RunConfig,
    WeightPolicy,
)
from core import (
    ConfigError,
    IncompatibleRunsError,
    LabeledSample,
    Provenance,
    load_dataset,
    save_dataset,
    split_train_validation,
)
from datagen import corrupt, generate_clean, injected_force_rms
from models import PairwiseModel, build_model, save_checkpoint
from refine import median_iqr, refine, relative_change, write_error_table
from trainer import TrainingLog, evaluate, evaluate_subsets, train, write_training_log
from weighting import threshold_for_outlier_fraction

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CURVE_METRICS = ["clean_rmse", "noisy_rmse", "val_rmse", "mean_weight", "noisy_truth_rmse", "val_energy_rmse"]


class ExperimentManifest(BaseModel):
    name: str = Field(description="Run directory name")
    command: str = Field(description="Command that produced the run")
    arguments: Dict[str, Any] = Field(default_factory=dict, description="Resolved command arguments")
    config: Dict[str, Any] = Field(default_factory=dict, description="Full run configuration")
    seed: int = Field(default=0)
    inputs: Dict[str, str] = Field(default_factory=dict, description="Input path -> sha256")
    outputs: Dict[str, str] = Field(default_factory=dict, description="Output path relative to the run dir -> sha256")


@dataclass
class OutlierSummary:
    corrupted_low_weight_share: Optional[float]
    clean_low_weight_share: Optional[float]


@dataclass
class RunSummary:
    bootstrap: bool
    z_threshold: Optional[float]
    epochs: int
    alpha: Optional[float]
    val_force_rmse: float
    val_energy_rmse: float
    median_val_force_rmse: float
    iqr_low: float
    iqr_high: float
    clean_rmse: float
    noisy_rmse: float
    noisy_truth_rmse: float
    mean_weight: Optional[float]
    corrupted_low_weight_share: Optional[float]
    clean_low_weight_share: Optional[float]

    @property
    def finite(self) -> bool:
        required = [self.val_force_rmse, self.median_val_force_rmse]
        if self.mean_weight is not None:
            required.append(self.mean_weight)
        return all(math.isfinite(v) for v in required)


class StandardTask(BaseModel):
    """Desk-scale noisy-label task: a 5-particle Lennard-Jones cluster with 10% systematically corrupted forces."""

    n: int = Field(default=1000, ge=1)
    particles: int = Field(default=5, ge=1)
    potential: PotentialKind = Field(default=PotentialKind.LENNARD_JONES)
    # one fixed magnitude keeps every corrupted loss well clear of the clean ones
    noise: NoiseSpec = Field(default_factory=lambda: NoiseSpec(force_noise_magnitude=(2.0, 2.0)))
    epochs: int = Field(default=500, ge=0)
    seed: int = Field(default=7)
    batch_size: int = Field(default=8, ge=1)
    learning_rate: float = Field(default=2e-3, gt=0.0)

    def dataset(self) -> List[LabeledSample]:
        clean = generate_clean(self.n, self.particles, self.potential, self.seed)
        return corrupt(clean, self.noise, self.seed)

    def snapshot_epochs(self) -> List[int]:
        # early, middle and late on a log scale
        if self.epochs == 0:
            return []
        middle = max(int(round(math.sqrt(self.epochs))) - 1, 0)
        return sorted({0, middle, self.epochs - 1})

    def run_config(self, bootstrap: bool = True, z_threshold: Optional[float] = None, workers: int = 1) -> RunConfig:
        policy = None
        if bootstrap:
            if z_threshold is None:
                z_threshold = threshold_for_outlier_fraction(self.noise.fraction or 0.10)
            policy = WeightPolicy(z_threshold=z_threshold)
        return RunConfig(
            seed=self.seed,
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            lr_schedule=LearningRateSchedule.COSINE,
            loss_spec=CompositeLossSpec(lambda_energy=0.0, lambda_force=1.0),
            loss_channel=LossChannel.FORCE,
            weight_policy=policy,
            workers=workers,
            snapshot_epochs=self.snapshot_epochs(),
        )

    def refinement_plan(self, bootstrap: bool = False, cycles: int = 4) -> RefinementPlan:
        return RefinementPlan(
            cycles=cycles,
            z_threshold=threshold_for_outlier_fraction(self.noise.fraction or 0.10),
            inner_config=self.run_config(bootstrap=bootstrap),
        )


def dump_config(model: BaseModel) -> Dict[str, Any]:
    # python-mode dump keeps inf thresholds; json round-trip normalises enums and tuples
    return json.loads(json.dumps(model.model_dump()))


def write_json(payload: Any, path: Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    run_dir: Path,
    command: str,
    arguments: Dict[str, Any],
    config: Dict[str, Any],
    seed: int,
    inputs: Sequence[Path],
    outputs: Sequence[Path],
) -> ExperimentManifest:
    run_dir = Path(run_dir)
    manifest = ExperimentManifest(
        name=run_dir.name,
        command=command,
        arguments=arguments,
        config=config,
        seed=seed,
        inputs={str(Path(p).resolve()): hash_file(p) for p in inputs},
        outputs={Path(p).relative_to(run_dir).as_posix(): hash_file(p) for p in sorted(set(outputs))},
    )
    write_json(manifest.model_dump(), run_dir / MANIFEST_NAME)
    return manifest


def load_manifest(path: Path) -> ExperimentManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return ExperimentManifest.model_validate(json.loads(path.read_text(encoding="utf-8")))


def outlier_identification(
    train_set: Sequence[LabeledSample],
    final_weights: Dict[int, float],
    corrupted_cutoff: float = 0.1,
    clean_cutoff: float = 0.5,
) -> OutlierSummary:
    """Share of corrupted samples below ``corrupted_cutoff`` and of clean samples below ``clean_cutoff``."""
    corrupted = [final_weights[s.id] for s in train_set if s.provenance == Provenance.CORRUPTED and s.id in final_weights]
    clean = [final_weights[s.id] for s in train_set if s.provenance == Provenance.CLEAN and s.id in final_weights]
    return OutlierSummary(
        corrupted_low_weight_share=sum(w < corrupted_cutoff for w in corrupted) / len(corrupted) if corrupted else None,
        clean_low_weight_share=sum(w < clean_cutoff for w in clean) / len(clean) if clean else None,
    )


def summarize_run(
    model: PairwiseModel,
    log: TrainingLog,
    train_set: Sequence[LabeledSample],
    validation_set: Sequence[LabeledSample],
    config: RunConfig,
) -> RunSummary:
    spec = config.loss_spec
    validation = evaluate(model, [s.truth_view() for s in validation_set], spec)
    median, low, high = median_iqr(list(validation.per_sample_errors.values()))
    subsets = evaluate_subsets(model, train_set, spec)
    outliers = outlier_identification(train_set, log.final_weights)
    weights = list(log.final_weights.values())
    return RunSummary(
        bootstrap=config.bootstrapping,
        z_threshold=config.weight_policy.z_threshold if config.weight_policy is not None else None,
        epochs=log.epochs_trained,
        alpha=log.alpha,
        val_force_rmse=validation.force_rmse,
        val_energy_rmse=validation.energy_rmse,
        median_val_force_rmse=median,
        iqr_low=low,
        iqr_high=high,
        clean_rmse=subsets.clean_rmse,
        noisy_rmse=subsets.noisy_rmse,
        noisy_truth_rmse=subsets.noisy_truth_rmse,
        mean_weight=sum(weights) / len(weights) if weights else None,
        corrupted_low_weight_share=outliers.corrupted_low_weight_share,
        clean_low_weight_share=outliers.clean_low_weight_share,
    )


def run_training(
    dataset_path: Path, config: RunConfig, run_dir: Path, arguments: Optional[Dict[str, Any]] = None
) -> RunSummary:
    dataset_path = Path(dataset_path)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(dataset_path)
    train_set, validation_set = split_train_validation(samples, config.validation_fraction, config.seed)
    model = build_model(config.model, config.seed)
    logger.info("training %s model on %d samples (%d validation), bootstrap=%s, workers=%d",
                config.model.kind.value, len(train_set), len(validation_set), config.bootstrapping, config.workers)
    model, log = train(model, train_set, validation_set, config)
    summary = summarize_run(model, log, train_set, validation_set, config)

    config_dict = dump_config(config)
    outputs = write_training_log(log, run_dir)
    outputs.append(save_checkpoint(model, run_dir / "checkpoint.json"))
    outputs.append(write_json(config_dict, run_dir / "config.json"))
    outputs.append(write_json(asdict(summary), run_dir / "summary.json"))
    write_manifest(run_dir, "train", arguments or {}, config_dict, config.seed, [dataset_path], outputs)
    logger.info("run %s: val force RMSE %.6g (median %.6g)", run_dir, summary.val_force_rmse, summary.median_val_force_rmse)
    return summary


def run_refinement(
    dataset_path: Path, plan: RefinementPlan, run_dir: Path, arguments: Optional[Dict[str, Any]] = None
) -> pd.DataFrame:
    dataset_path = Path(dataset_path)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    result = refine(load_dataset(dataset_path), plan)

    outputs = [write_error_table(result.rows, run_dir / "error_table.csv")]
    weights = pd.DataFrame(
        [
            {"cycle": cycle, "sample_id": sid, "weight": w}
            for cycle, table in enumerate(result.weights)
            for sid, w in table.items()
        ],
        columns=["cycle", "sample_id", "weight"],
    )
    weights.to_csv(run_dir / "weights.csv", index=False)
    outputs.append(run_dir / "weights.csv")
    for cycle, model in enumerate(result.models):
        outputs.append(save_checkpoint(model, run_dir / f"checkpoint_cycle{cycle}.json"))
    config_dict = dump_config(plan)
    outputs.append(write_json(config_dict, run_dir / "config.json"))
    write_manifest(run_dir, "refine", arguments or {}, config_dict, plan.inner_config.seed, [dataset_path], outputs)
    return pd.read_csv(run_dir / "error_table.csv")


def _with_threshold(config: RunConfig, z_t: float) -> RunConfig:
    policy = config.weight_policy or WeightPolicy()
    return config.model_copy(update={"weight_policy": policy.model_copy(update={"z_threshold": z_t})})


def dedupe_grid(grid: Sequence[float]) -> List[float]:
    unique = list(dict.fromkeys(float(z) for z in grid))
    if not unique:
        raise ConfigError("threshold grid is empty")
    if len(unique) < len(grid):
        logger.warning("threshold grid had %d duplicate value(s); running %s", len(grid) - len(unique), unique)
    return unique


def sweep_threshold(
    dataset_path: Path,
    config: RunConfig,
    grid: Sequence[float],
    out_dir: Path,
    arguments: Optional[Dict[str, Any]] = None,
) -> pd.DataFrame:
    """One bootstrapped run per threshold; returns the z_t sensitivity table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    outputs = []
    for z_t in dedupe_grid(grid):
        point_dir = out_dir / f"z_{z_t:g}"
        summary = run_training(dataset_path, _with_threshold(config, z_t), point_dir, {**(arguments or {}), "z_threshold": z_t})
        rows.append({
            "z_t": z_t,
            "median_val_rmse": summary.median_val_force_rmse,
            "iqr_low": summary.iqr_low,
            "iqr_high": summary.iqr_high,
        })
        outputs.extend(sorted(p for p in point_dir.iterdir() if p.name != MANIFEST_NAME))
        logger.info("sweep point z_t=%g: median val force RMSE %.6g", z_t, summary.median_val_force_rmse)
    table = pd.DataFrame(rows, columns=["z_t", "median_val_rmse", "iqr_low", "iqr_high"])
    table.to_csv(out_dir / "sweep.csv", index=False)
    outputs.append(out_dir / "sweep.csv")
    write_manifest(out_dir, "sweep-threshold", arguments or {}, dump_config(config), config.seed, [Path(dataset_path)], outputs)
    return table


def load_run(run_dir: Path) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    run_dir = Path(run_dir)
    epochs_path = run_dir / "epochs.csv"
    summary_path = run_dir / "summary.json"
    for path in (epochs_path, summary_path):
        if not path.exists():
            raise FileNotFoundError(f"run directory {run_dir} is missing {path.name}")
    return pd.read_csv(epochs_path), json.loads(summary_path.read_text(encoding="utf-8"))


def _labels(run_dirs: Sequence[Path]) -> List[str]:
    labels = []
    for run_dir in run_dirs:
        label = Path(run_dir).name or str(run_dir)
        if label in labels:
            label = f"{label}_{len(labels)}"
        labels.append(label)
    return labels


def merge_reports(run_dirs: Sequence[Path], out_dir: Path) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Epoch-aligned curves across runs plus one summary row per run."""
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    labels = _labels(run_dirs)
    loaded = [load_run(d) for d in run_dirs]

    reference = loaded[0][0]["epoch"].tolist()
    for run_dir, (epochs, _) in zip(run_dirs, loaded):
        if epochs["epoch"].tolist() != reference:
            raise IncompatibleRunsError(f"epoch grid of {run_dir} does not match {run_dirs[0]}")

    curves = pd.DataFrame({"epoch": reference})
    for label, (epochs, _) in zip(labels, loaded):
        for metric in CURVE_METRICS:
            if metric in epochs.columns:
                curves[f"{label}_{metric}"] = epochs[metric].to_numpy()

    vanilla = next((label for label, (_, s) in zip(labels, loaded) if not s["bootstrap"]), None)
    boosted = next((label for label, (_, s) in zip(labels, loaded) if s["bootstrap"]), None)
    if vanilla is not None and boosted is not None:
        # error without bootstrapping relative to with bootstrapping
        for metric in ("val_rmse", "val_energy_rmse"):
            curves[f"{metric}_ratio"] = curves[f"{vanilla}_{metric}"] / curves[f"{boosted}_{metric}"]

    summary = pd.DataFrame(
        [
            {
                "run": label,
                "bootstrap": s["bootstrap"],
                "z_threshold": s["z_threshold"],
                "median_val_force_rmse": s["median_val_force_rmse"],
                "iqr_low": s["iqr_low"],
                "iqr_high": s["iqr_high"],
                "val_force_rmse": s["val_force_rmse"],
                "val_energy_rmse": s["val_energy_rmse"],
                "noisy_truth_rmse": s["noisy_truth_rmse"],
                "corrupted_low_weight_share": s["corrupted_low_weight_share"],
                "clean_low_weight_share": s["clean_low_weight_share"],
            }
            for label, (_, s) in zip(labels, loaded)
        ]
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves.to_csv(out_dir / "report_curves.csv", index=False)
    summary.to_csv(out_dir / "report_summary.csv", index=False)
    return curves, summary


def verify_outputs(manifest: ExperimentManifest, run_dir: Path) -> List[str]:
    """Relative paths whose sha256 differs from (or is missing versus) the manifest."""
    run_dir = Path(run_dir)
    mismatched = []
    for relative, digest in manifest.outputs.items():
        path = run_dir / relative
        if not path.exists() or hash_file(path) != digest:
            mismatched.append(relative)
    return mismatched


ACCEPTANCE_GROUPS = ("curves", "refinement", "sweep")
SWEEP_GRID = [0.5, 1.0, 1.28, 1.5, 2.0]
ACCEPTANCE_COLUMNS = ["gate", "value", "bound", "passed"]


@dataclass
class GateResult:
    gate: str
    value: float
    bound: str
    passed: bool


def _gate(gate: str, value: Optional[float], bound: str, check) -> GateResult:
    value = math.nan if value is None else float(value)
    return GateResult(gate, value, bound, bool(math.isfinite(value) and check(value)))


def _curve_gates(dataset_path: Path, task: StandardTask, injected: float, out_dir: Path) -> Tuple[List[GateResult], RunSummary]:
    vanilla = run_training(dataset_path, task.run_config(bootstrap=False), out_dir / "vanilla")
    boot = run_training(dataset_path, task.run_config(), out_dir / "boot")
    vanilla_curves, _ = load_run(out_dir / "vanilla")
    truth = vanilla_curves["noisy_truth_rmse"].to_numpy()
    rise = truth[-1] / truth.min() if truth.size and truth.min() > 0 else math.nan
    gates = [
        _gate("vanilla_noisy_below_injected", vanilla.noisy_rmse / injected, "< 1", lambda v: v < 1.0),
        _gate("vanilla_truth_error_rises", rise, "> 1.05", lambda v: v > 1.05),
        _gate("boot_noisy_plateau", boot.noisy_rmse / injected, "in [0.7, 1.3]", lambda v: 0.7 <= v <= 1.3),
        _gate("boot_truth_vs_clean_validation", boot.noisy_truth_rmse / boot.val_force_rmse, "<= 2", lambda v: v <= 2.0),
        _gate("corrupted_low_weight_share", boot.corrupted_low_weight_share, ">= 0.9", lambda v: v >= 0.9),
        _gate("clean_low_weight_share", boot.clean_low_weight_share, "<= 0.05", lambda v: v <= 0.05),
        _gate("validation_ratio", boot.val_force_rmse / vanilla.val_force_rmse, "<= 0.5", lambda v: v <= 0.5),
    ]
    return gates, boot


def acceptance(task: StandardTask, out_dir: Path, groups: Sequence[str] = ACCEPTANCE_GROUPS) -> List[GateResult]:
    """Run the standard task end to end and check each pass/fail gate; writes acceptance.csv."""
    unknown = sorted(set(groups) - set(ACCEPTANCE_GROUPS))
    if unknown:
        raise ConfigError(f"unknown acceptance groups: {', '.join(unknown)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = task.dataset()
    dataset_path = save_dataset(samples, out_dir / "dataset.jsonl", {"generator": "standard-task", **dump_config(task)})
    train_set, _ = split_train_validation(samples, task.run_config().validation_fraction, task.seed)
    injected = injected_force_rms(train_set)
    if injected is None:
        raise ConfigError("the standard task needs corrupted training samples")

    gates: List[GateResult] = []
    boot: Optional[RunSummary] = None
    if "curves" in groups or "refinement" in groups:
        curve_gates, boot = _curve_gates(dataset_path, task, injected, out_dir)
        if "curves" in groups:
            gates.extend(curve_gates)
    if "refinement" in groups:
        vanilla_cycles = run_refinement(dataset_path, task.refinement_plan(bootstrap=False), out_dir / "refine_vanilla")
        later = vanilla_cycles.loc[vanilla_cycles["cycle"] >= 2, "median_force_rmse"]
        gates.append(_gate("refined_vanilla_vs_boot", later.min() / boot.median_val_force_rmse if len(later) else None,
                           "<= 1.2", lambda v: v <= 1.2))
        boot_cycles = run_refinement(dataset_path, task.refinement_plan(bootstrap=True, cycles=2), out_dir / "refine_boot")
        gates.append(_gate("refined_boot_change", relative_change(boot_cycles["median_force_rmse"].tolist()),
                           "< 0.1", lambda v: v < 0.1))
    if "sweep" in groups:
        table = sweep_threshold(dataset_path, task.run_config(), SWEEP_GRID, out_dir / "sweep")
        medians = table["median_val_rmse"]
        gates.append(_gate("threshold_sensitivity", medians.max() / medians.min(), "< 1.2", lambda v: v < 1.2))

    pd.DataFrame([asdict(g) for g in gates], columns=ACCEPTANCE_COLUMNS).to_csv(out_dir / "acceptance.csv", index=False)
    for g in gates:
        log = logger.info if g.passed else logger.warning
        log("gate %s: %.4g (%s) %s", g.gate, g.value, g.bound, "pass" if g.passed else "FAIL")
    return gates
