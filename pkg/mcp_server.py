#!/usr/bin/env python3
"""
MCP server exposing the experiment commands as tools over stdio.

Every tool writes into ``output_dir`` from config.json and answers with a
plain-text summary naming the files it wrote. Diagnostics go to stderr;
stdout belongs to the transport.
"""
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List

from mcp.server import Server
from mcp.server.stdio import stdio_server
from mcp.types import Tool
from pydantic import BaseModel, Field, ValidationError

from cli import parse_args, recorded_arguments, run_config_from_args
from config import NoiseMode, NoiseSpec, PotentialKind, RefinementPlan, default_early_stop_epoch
from core import NRTError, Provenance, save_dataset
from datagen import corrupt, generate_clean
from experiments import merge_reports, run_refinement, run_training, sweep_threshold

logger = logging.getLogger(__name__)

CONFIG_PATH = Path(__file__).with_name("config.json")


class ServerConfig(BaseModel):
    output_dir: str = Field(default="runs", description="Directory that receives datasets and run directories")
    default_seed: int = Field(default=0, description="Seed used when a tool call does not name one")


def load_server_config(path: Path = CONFIG_PATH) -> ServerConfig:
    if path.exists():
        return ServerConfig.model_validate(json.loads(path.read_text(encoding="utf-8")))
    return ServerConfig()


server = Server("noise-resilient-training")
settings = load_server_config()


def _text(message: str) -> List[Dict[str, str]]:
    return [{"type": "text", "text": message}]


def _output_path(name: str) -> Path:
    path = Path(settings.output_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _training_argv(command: str, arguments: Dict[str, Any], out: Path) -> List[str]:
    argv = [command, "--dataset", str(_output_path(arguments["dataset"])), "--out", str(out)]
    argv += ["--seed", str(arguments.get("seed", settings.default_seed))]
    for key in ("epochs", "workers", "z_threshold", "loss_channel", "bootstrap", "batch_size", "learning_rate"):
        if key in arguments:
            argv += [f"--{key.replace('_', '-')}", str(arguments[key])]
    return argv


@server.list_tools()
async def list_tools():
    dataset_property = {"type": "string", "description": "Dataset file name inside the output directory"}
    return [
        Tool(
            name="generate_dataset",
            description="Generate a synthetic pair-potential dataset with a share of systematically corrupted labels",
            inputSchema={
                "type": "object",
                "properties": {
                    "name": {"type": "string", "description": "Output file name (default: dataset.jsonl)"},
                    "n": {"type": "integer", "description": "Number of configurations", "default": 1000},
                    "particles": {"type": "integer", "description": "Particles per configuration", "default": 5},
                    "potential": {"type": "string", "enum": [p.value for p in PotentialKind]},
                    "noise_fraction": {"type": "number", "description": "Corrupted share in [0, 1)", "default": 0.1},
                    "noise_mode": {"type": "string", "enum": [m.value for m in NoiseMode]},
                    "seed": {"type": "integer"},
                },
            },
        ),
        Tool(
            name="train_model",
            description="Train one model, with or without on-the-fly outlier down-weighting",
            inputSchema={
                "type": "object",
                "properties": {
                    "dataset": dataset_property,
                    "name": {"type": "string", "description": "Run directory name"},
                    "bootstrap": {"type": "string", "enum": ["on", "off"], "default": "on"},
                    "z_threshold": {"type": "number", "description": "z-score where weights cross 0.5"},
                    "epochs": {"type": "integer"},
                    "workers": {"type": "integer"},
                    "loss_channel": {"type": "string", "enum": ["total", "force"]},
                    "seed": {"type": "integer"},
                },
                "required": ["dataset"],
            },
        ),
        Tool(
            name="refine_baseline",
            description="Run the iterative-refinement baseline and return its per-cycle error table",
            inputSchema={
                "type": "object",
                "properties": {
                    "dataset": dataset_property,
                    "name": {"type": "string"},
                    "cycles": {"type": "integer", "default": 4},
                    "early_stop": {"type": "boolean", "description": "Truncate cycle 0 at 12% of the epochs"},
                    "refine_threshold": {"type": "number", "description": "z_t for the static weights (default flags the top 10%)"},
                    "epochs": {"type": "integer"},
                    "seed": {"type": "integer"},
                },
                "required": ["dataset"],
            },
        ),
        Tool(
            name="sweep_threshold",
            description="Train one bootstrapped model per z-threshold and return the sensitivity table",
            inputSchema={
                "type": "object",
                "properties": {
                    "dataset": dataset_property,
                    "name": {"type": "string"},
                    "grid": {"type": "array", "items": {"type": "number"}},
                    "epochs": {"type": "integer"},
                    "seed": {"type": "integer"},
                },
                "required": ["dataset", "grid"],
            },
        ),
        Tool(
            name="report_runs",
            description="Merge run directories into epoch-aligned comparison CSVs",
            inputSchema={
                "type": "object",
                "properties": {
                    "run_dirs": {"type": "array", "items": {"type": "string"}},
                    "name": {"type": "string", "description": "Report directory name (default: report)"},
                },
                "required": ["run_dirs"],
            },
        ),
    ]


@server.call_tool()
async def call_tool(name: str, arguments: dict):
    arguments = arguments or {}
    handlers = {
        "generate_dataset": handle_generate_dataset,
        "train_model": handle_train_model,
        "refine_baseline": handle_refine_baseline,
        "sweep_threshold": handle_sweep_threshold,
        "report_runs": handle_report_runs,
    }
    handler = handlers.get(name)
    if handler is None:
        return _text(f"Unknown tool: {name}")
    try:
        return await handler(arguments)
    except SystemExit:
        return _text(f"Error executing {name}: invalid arguments {json.dumps(arguments)}")
    except (NRTError, ValidationError, FileNotFoundError, KeyError) as e:
        logger.warning("tool %s failed: %s", name, e)
        return _text(f"Error executing {name}: {e}")


async def handle_generate_dataset(arguments: dict):
    seed = arguments.get("seed", settings.default_seed)
    spec = NoiseSpec(
        fraction=arguments.get("noise_fraction", 0.1),
        mode=NoiseMode(arguments.get("noise_mode", NoiseMode.SYSTEMATIC_DIRECTIONAL.value)),
    )
    potential = PotentialKind(arguments.get("potential", PotentialKind.LENNARD_JONES.value))
    particles = arguments.get("particles", 5)
    samples = corrupt(generate_clean(arguments.get("n", 1000), particles, potential, seed), spec, seed)
    meta = {"potential": potential.value, "particles": particles, "seed": seed, "noise": json.loads(spec.model_dump_json())}
    path = save_dataset(samples, _output_path(arguments.get("name", "dataset.jsonl")), meta)
    n_corrupt = sum(1 for s in samples if s.provenance == Provenance.CORRUPTED)
    return _text(f"**Dataset written**\n\n{path}\n{len(samples)} samples, {n_corrupt} with corrupted labels")


async def handle_train_model(arguments: dict):
    out = _output_path(arguments.get("name", "run"))
    args = parse_args(_training_argv("train", {"bootstrap": "on", **arguments}, out))
    summary = run_training(Path(args.dataset), run_config_from_args(args), out, recorded_arguments(args))
    lines = [
        f"**Run written to {out}**",
        "",
        f"validation force RMSE: {summary.val_force_rmse:.6g}",
        f"median validation force RMSE: {summary.median_val_force_rmse:.6g} (IQR {summary.iqr_low:.6g} - {summary.iqr_high:.6g})",
        f"corrupted-subset error vs hidden truth: {summary.noisy_truth_rmse:.6g}",
    ]
    if summary.corrupted_low_weight_share is not None:
        lines.append(f"corrupted samples with weight < 0.1: {summary.corrupted_low_weight_share:.1%}")
    return _text("\n".join(lines))


async def handle_refine_baseline(arguments: dict):
    out = _output_path(arguments.get("name", "refine"))
    args = parse_args(_training_argv("refine", {"bootstrap": "off", **arguments}, out))
    epochs = args.epochs
    options = {"z_threshold": arguments["refine_threshold"]} if "refine_threshold" in arguments else {}
    plan = RefinementPlan(
        cycles=arguments.get("cycles", 4),
        early_stop_epoch=default_early_stop_epoch(epochs) if arguments.get("early_stop") else None,
        inner_config=run_config_from_args(args),
        **options,
    )
    table = run_refinement(Path(args.dataset), plan, out, recorded_arguments(args))
    return _text(f"**Refinement written to {out}**\n\n{table.to_string(index=False)}")


async def handle_sweep_threshold(arguments: dict):
    out = _output_path(arguments.get("name", "sweep"))
    args = parse_args(_training_argv("sweep-threshold", {**arguments, "bootstrap": "on"}, out))
    table = sweep_threshold(Path(args.dataset), run_config_from_args(args), arguments["grid"], out, recorded_arguments(args))
    return _text(f"**Threshold sweep written to {out}**\n\n{table.to_string(index=False)}")


async def handle_report_runs(arguments: dict):
    out = _output_path(arguments.get("name", "report"))
    run_dirs = [_output_path(d) for d in arguments["run_dirs"]]
    curves, summary = merge_reports(run_dirs, out)
    return _text(f"**Report written to {out}**\n\n{len(curves)} epochs aligned\n\n{summary.to_string(index=False)}")


async def main():
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logger.info("starting MCP server, output_dir=%s", settings.output_dir)
    async with stdio_server() as (read_stream, write_stream):
        await server.run(
            read_stream,
            write_stream,
            server.create_initialization_options()
        )


if __name__ == "__main__":
    asyncio.run(main())
