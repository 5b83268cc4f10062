"""
Command-line harness.

    generate         synthetic dataset with controlled label corruption
    train            one vanilla or bootstrapped training run
    refine           iterative-refinement baseline
    sweep-threshold  one bootstrapped run per z_t in a grid
    report           epoch-aligned comparison of run directories
    replay           re-run a manifest and compare output hashes
    acceptance       standard task end to end, with pass/fail gates

Defaults resolve as: built-in < NRT_SEED < --config file < explicit flags.
"""
import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from config import (
    Activation,
    CompositeLossSpec,
    EnergyReduction,
    LearningRateSchedule,
    LossChannel,
    ModelConfig,
    ModelKind,
    NoiseMode,
    NoiseSpec,
    OptimizerKind,
    PotentialKind,
    RefinementPlan,
    RunConfig,
    UpdateSchedule,
    WeightPolicy,
    default_early_stop_epoch,
)
from core import ConfigError, NRTError, NonFiniteError, Provenance, save_dataset
from datagen import corrupt, generate_clean, injected_force_rms
from experiments import (
    ACCEPTANCE_GROUPS,
    StandardTask,
    acceptance,
    hash_file,
    load_manifest,
    merge_reports,
    run_refinement,
    run_training,
    sweep_threshold,
    verify_outputs,
)

logger = logging.getLogger(__name__)

SEED_ENV = "NRT_SEED"
EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _on_off(value: str) -> str:
    value = value.lower()
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=str, default=None, help="JSON file whose keys supply defaults for any flag")
    parser.add_argument("--seed", type=int, default=0, help=f"Global seed (env {SEED_ENV} overrides the built-in default)")
    parser.add_argument("--log-level", type=str, default="INFO", help="Logging level for stderr output")


def _add_training(parser: argparse.ArgumentParser):
    parser.add_argument("--dataset", type=str, required=False, help="Dataset JSON-lines file")
    parser.add_argument("--out", type=str, default="runs/run", help="Output run directory")
    parser.add_argument("--bootstrap", type=_on_off, default="off", help="Dynamic outlier down-weighting: on|off")
    parser.add_argument("--z-threshold", type=float, default=3.0, help="z-score where the weight crosses 0.5 (inf = trust all)")
    parser.add_argument("--warn-floor", type=float, default=0.25, help="Batch-mean weight below which a warning is logged")
    parser.add_argument("--update-every-early", type=int, default=1, help="Statistics update period (batches), first half of the run")
    parser.add_argument("--update-every-late", type=int, default=4, help="Statistics update period (batches), second half of the run")
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--learning-rate", type=float, default=1e-3)
    parser.add_argument("--lr-schedule", type=str, choices=[s.value for s in LearningRateSchedule], default=LearningRateSchedule.CONSTANT.value)
    parser.add_argument("--lr-final-fraction", type=float, default=0.01, help="Cosine schedule: final rate as a share of --learning-rate")
    parser.add_argument("--optimizer", type=str, choices=[k.value for k in OptimizerKind], default=OptimizerKind.ADAPTIVE_MOMENTS.value)
    parser.add_argument("--workers", type=int, default=1, help="Simulated data-parallel workers (round-robin batches)")
    parser.add_argument("--loss-channel", type=str, choices=[c.value for c in LossChannel], default=LossChannel.TOTAL.value)
    parser.add_argument("--lambda-energy", type=float, default=1.0)
    parser.add_argument("--lambda-force", type=float, default=10.0)
    parser.add_argument("--lambda-aux", type=float, default=0.0, help="Auxiliary channel weight; must stay 0 with the built-in models")
    parser.add_argument("--energy-reduction", type=str, choices=[r.value for r in EnergyReduction], default=EnergyReduction.PER_ATOM_MSE.value)
    parser.add_argument("--validation-fraction", type=float, default=0.15)
    parser.add_argument("--ema-alpha", type=float, default=None, help="Override the batches-per-epoch EMA rate")
    parser.add_argument("--model", type=str, choices=[k.value for k in ModelKind], default=ModelKind.PAIR_MLP.value)
    parser.add_argument("--cutoff", type=float, default=4.0)
    parser.add_argument("--hidden", type=int, nargs="+", default=[16, 16], help="Hidden layer widths of the pair network")
    parser.add_argument("--activation", type=str, choices=[a.value for a in Activation], default=Activation.TANH.value)
    parser.add_argument("--envelope-power", type=int, default=2, help="Exponent p of the (1-(r/rc)^2)^p cutoff envelope")
    parser.add_argument("--input-scale", type=float, default=1.0, help="Distance multiplier applied before the pair network")
    parser.add_argument("--basis-size", type=int, default=16, help="Gaussian radial functions in the linear basis model")
    parser.add_argument("--basis-min", type=float, default=0.8, help="Smallest basis centre of the linear basis model")
    parser.add_argument("--snapshot-every", type=int, default=0, help="Per-sample snapshot cadence in epochs (0 = final epoch only)")
    parser.add_argument("--snapshot-epochs", type=int, nargs="*", default=[], help="Explicit epochs for per-sample snapshots")
    parser.add_argument("--eval-every", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nrt",
        description="Noise-resilient training of pair-potential models with on-the-fly outlier down-weighting.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    generate = subparsers.add_parser("generate", help="Generate a synthetic dataset")
    _add_common(generate)
    generate.add_argument("--n", type=int, default=1000, help="Number of configurations")
    generate.add_argument("--particles", type=int, default=5)
    generate.add_argument("--potential", type=str, choices=[p.value for p in PotentialKind], default=PotentialKind.LENNARD_JONES.value)
    generate.add_argument("--noise-fraction", type=float, default=0.0, help="Share of samples with corrupted labels, in [0, 1)")
    generate.add_argument("--noise-mode", type=str, choices=[m.value for m in NoiseMode], default=NoiseMode.SYSTEMATIC_DIRECTIONAL.value)
    generate.add_argument("--noise-low", type=float, default=1.5, help="Lower bound of the per-sample force perturbation RMS")
    generate.add_argument("--noise-high", type=float, default=2.5, help="Upper bound of the per-sample force perturbation RMS")
    generate.add_argument("--energy-offset", type=float, default=None)
    generate.add_argument("--displacement", type=float, default=0.05, help="Gaussian displacement around the reference geometry")
    generate.add_argument("--out", type=str, default="dataset.jsonl")
    generate.set_defaults(handler=cmd_generate)

    train = subparsers.add_parser("train", help="Train one model")
    _add_common(train)
    _add_training(train)
    train.set_defaults(handler=cmd_train)

    refine = subparsers.add_parser("refine", help="Iterative-refinement baseline")
    _add_common(refine)
    _add_training(refine)
    refine.add_argument("--cycles", type=int, default=4)
    refine.add_argument("--early-stop-epoch", type=int, default=None, help="Truncate cycle 0 at this epoch")
    refine.add_argument("--early-stop", action="store_true", help="Truncate cycle 0 at 12%% of --epochs")
    refine.add_argument("--refine-threshold", type=float, default=None, help="z_t for the static between-cycle weights (default flags the top 10%%)")
    refine.set_defaults(handler=cmd_refine)

    sweep = subparsers.add_parser("sweep-threshold", help="Bootstrapped runs over a z_t grid")
    _add_common(sweep)
    _add_training(sweep)
    sweep.add_argument("--grid", type=float, nargs="*", default=[0.5, 1.0, 1.28, 1.5, 2.0])
    sweep.set_defaults(handler=cmd_sweep_threshold)

    report = subparsers.add_parser("report", help="Merge run directories into comparison CSVs")
    _add_common(report)
    report.add_argument("run_dirs", nargs="*", help="Run directories to compare")
    report.add_argument("--out", type=str, default="report")
    report.set_defaults(handler=cmd_report)

    replay = subparsers.add_parser("replay", help="Re-run a manifest and compare output hashes")
    _add_common(replay)
    replay.add_argument("--manifest", type=str, required=False, help="manifest.json or its run directory")
    replay.add_argument("--scratch", type=str, default=None, help="Directory for the replayed outputs")
    replay.set_defaults(handler=cmd_replay)

    accept = subparsers.add_parser("acceptance", help="Run the standard task and check its pass/fail gates")
    _add_common(accept)
    accept.add_argument("--out", type=str, default="runs/acceptance")
    accept.add_argument("--n", type=int, default=1000, help="Number of configurations")
    accept.add_argument("--particles", type=int, default=5)
    accept.add_argument("--epochs", type=int, default=500)
    accept.add_argument("--groups", type=str, nargs="+", choices=list(ACCEPTANCE_GROUPS), default=list(ACCEPTANCE_GROUPS))
    accept.set_defaults(handler=cmd_acceptance, seed=7)

    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def load_config_file(path: str, sub: argparse.ArgumentParser) -> Dict[str, Any]:
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(values, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    known = {action.dest for action in sub._actions}
    normalized = {key.replace("-", "_"): value for key, value in values.items()}
    unknown = sorted(set(normalized) - known)
    if unknown:
        raise UsageError(f"unknown keys in config file {path}: {', '.join(unknown)}")
    return normalized


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    preliminary, _ = parser.parse_known_args(argv)
    sub = _subparser(parser, preliminary.command)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            sub.set_defaults(seed=int(env_seed))
        except ValueError:
            parser.error(f"{SEED_ENV} must be an integer, got {env_seed!r}")
    if getattr(preliminary, "config", None):
        try:
            sub.set_defaults(**load_config_file(preliminary.config, sub))
        except UsageError as e:
            parser.error(str(e))
    return parser.parse_args(argv)


def recorded_arguments(args: argparse.Namespace) -> Dict[str, Any]:
    """JSON-safe resolved arguments, enough to rebuild the namespace on replay."""
    recorded = {}
    for key, value in vars(args).items():
        if key in ("handler", "config", "log_level"):
            continue
        if key == "dataset" and value is not None:
            value = str(Path(value).resolve())
        recorded[key] = value
    return recorded


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    policy = None
    if args.bootstrap == "on":
        policy = WeightPolicy(
            z_threshold=args.z_threshold,
            warn_floor=args.warn_floor,
            update_schedule=UpdateSchedule(early_period=args.update_every_early, late_period=args.update_every_late),
        )
    return RunConfig(
        seed=args.seed,
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        optimizer=OptimizerKind(args.optimizer),
        lr_schedule=LearningRateSchedule(args.lr_schedule),
        lr_final_fraction=args.lr_final_fraction,
        loss_spec=CompositeLossSpec(
            lambda_energy=args.lambda_energy,
            lambda_force=args.lambda_force,
            lambda_aux=args.lambda_aux,
            energy_reduction=EnergyReduction(args.energy_reduction),
        ),
        weight_policy=policy,
        workers=args.workers,
        validation_fraction=args.validation_fraction,
        loss_channel=LossChannel(args.loss_channel),
        ema_alpha=args.ema_alpha,
        model=ModelConfig(
            kind=ModelKind(args.model),
            cutoff=args.cutoff,
            hidden_widths=list(args.hidden),
            activation=Activation(args.activation),
            envelope_power=args.envelope_power,
            input_scale=args.input_scale,
            basis_size=args.basis_size,
            basis_min=args.basis_min,
        ),
        snapshot_every=args.snapshot_every,
        snapshot_epochs=list(args.snapshot_epochs),
        eval_every=args.eval_every,
    )


def _require_dataset(args: argparse.Namespace) -> Path:
    if not args.dataset:
        raise UsageError("--dataset is required")
    path = Path(args.dataset)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return path


def cmd_generate(args: argparse.Namespace) -> int:
    if args.n < 0:
        raise UsageError("--n must be non-negative")
    spec = NoiseSpec(
        fraction=args.noise_fraction,
        force_noise_magnitude=(args.noise_low, args.noise_high),
        energy_offset=args.energy_offset,
        mode=NoiseMode(args.noise_mode),
    )
    samples = generate_clean(args.n, args.particles, PotentialKind(args.potential), args.seed, args.displacement)
    samples = corrupt(samples, spec, args.seed)
    meta = {
        "generator": "pair-potential",
        "potential": args.potential,
        "particles": args.particles,
        "seed": args.seed,
        "noise": json.loads(spec.model_dump_json()),
    }
    path = save_dataset(samples, Path(args.out), meta)
    n_corrupt = sum(1 for s in samples if s.provenance == Provenance.CORRUPTED)
    rms = injected_force_rms(samples)
    print(f"wrote {len(samples)} samples ({n_corrupt} corrupted) to {path}")
    if rms is not None:
        print(f"injected force RMS: {rms:.6g}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    dataset = _require_dataset(args)
    config = run_config_from_args(args)
    summary = run_training(dataset, config, Path(args.out), recorded_arguments(args))
    print(f"run written to {args.out}")
    print(f"validation force RMSE: {summary.val_force_rmse:.6g} (median {summary.median_val_force_rmse:.6g})")
    if summary.corrupted_low_weight_share is not None:
        print(f"corrupted samples with w < 0.1: {summary.corrupted_low_weight_share:.1%}")
    return EXIT_OK if summary.finite else EXIT_FAILED


def cmd_refine(args: argparse.Namespace) -> int:
    dataset = _require_dataset(args)
    if args.cycles < 1:
        raise UsageError("--cycles must be at least 1")
    early_stop = args.early_stop_epoch
    if early_stop is None and args.early_stop:
        early_stop = default_early_stop_epoch(args.epochs)
    options = {} if args.refine_threshold is None else {"z_threshold": args.refine_threshold}
    plan = RefinementPlan(cycles=args.cycles, early_stop_epoch=early_stop, inner_config=run_config_from_args(args), **options)
    table = run_refinement(dataset, plan, Path(args.out), recorded_arguments(args))
    print(table.to_string(index=False))
    return EXIT_OK if table["median_force_rmse"].notna().all() else EXIT_FAILED


def cmd_sweep_threshold(args: argparse.Namespace) -> int:
    dataset = _require_dataset(args)
    if not args.grid:
        raise UsageError("--grid needs at least one threshold")
    args.bootstrap = "on"
    table = sweep_threshold(dataset, run_config_from_args(args), args.grid, Path(args.out), recorded_arguments(args))
    print(table.to_string(index=False))
    ratio = table["median_val_rmse"].max() / table["median_val_rmse"].min()
    print(f"max/min median validation RMSE: {ratio:.4f}")
    return EXIT_OK if table["median_val_rmse"].notna().all() else EXIT_FAILED


def cmd_report(args: argparse.Namespace) -> int:
    if not args.run_dirs:
        raise UsageError("report needs at least one run directory")
    curves, summary = merge_reports([Path(d) for d in args.run_dirs], Path(args.out))
    print(summary.to_string(index=False))
    print(f"wrote {Path(args.out) / 'report_curves.csv'} ({len(curves)} epochs)")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    if not args.manifest:
        raise UsageError("--manifest is required")
    manifest = load_manifest(Path(args.manifest))
    for path, digest in manifest.inputs.items():
        if not Path(path).exists() or hash_file(Path(path)) != digest:
            print(f"input changed or missing: {path}", file=sys.stderr)
            return EXIT_FAILED
    scratch = Path(args.scratch) if args.scratch else Path(tempfile.mkdtemp(prefix="nrt-replay-"))
    recorded = dict(manifest.arguments)
    recorded["out"] = str(scratch)
    parser = build_parser()
    sub = _subparser(parser, manifest.command)
    replay_args = sub.parse_args([])
    for key, value in recorded.items():
        setattr(replay_args, key, value)
    replay_args.command = manifest.command
    status = replay_args.handler(replay_args)
    mismatched = verify_outputs(manifest, scratch)
    for relative in mismatched:
        print(f"hash mismatch: {relative}", file=sys.stderr)
    print(f"replayed {manifest.command} into {scratch}: {len(manifest.outputs) - len(mismatched)}/{len(manifest.outputs)} outputs match")
    return EXIT_OK if status == EXIT_OK and not mismatched else EXIT_FAILED


def cmd_acceptance(args: argparse.Namespace) -> int:
    task = StandardTask(n=args.n, particles=args.particles, epochs=args.epochs, seed=args.seed)
    gates = acceptance(task, Path(args.out), args.groups)
    for gate in gates:
        print(f"{'PASS' if gate.passed else 'FAIL'}  {gate.gate}: {gate.value:.4g} ({gate.bound})")
    failed = [g.gate for g in gates if not g.passed]
    print(f"{len(gates) - len(failed)}/{len(gates)} gates passed; table in {Path(args.out) / 'acceptance.csv'}")
    return EXIT_OK if not failed else EXIT_FAILED


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except (UsageError, ValidationError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED
    except NonFiniteError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_FAILED
    except NRTError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
