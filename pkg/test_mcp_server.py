#!/usr/bin/env python3
"""
MCP tool surface: tool listing, dispatch and the text responses of each handler
"""
import asyncio
import json

import pandas as pd
import pytest

import mcp_server
from mcp_server import ServerConfig, call_tool, list_tools


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.setattr(mcp_server, "settings", ServerConfig(output_dir=str(tmp_path), default_seed=2))
    return tmp_path


def _call(name, arguments):
    result = asyncio.run(call_tool(name, arguments))
    assert len(result) == 1 and result[0]["type"] == "text"
    return result[0]["text"]


def test_list_tools():
    tools = asyncio.run(list_tools())
    names = [tool.name for tool in tools]
    assert names == ["generate_dataset", "train_model", "refine_baseline", "sweep_threshold", "report_runs"]
    train = next(tool for tool in tools if tool.name == "train_model")
    assert train.inputSchema["required"] == ["dataset"]


def test_unknown_tool(workspace):
    assert _call("make_slides", {}) == "Unknown tool: make_slides"


def test_generate_then_train_then_report(workspace):
    text = _call("generate_dataset", {"n": 30, "particles": 3, "noise_fraction": 0.1})
    assert "30 samples, 3 with corrupted labels" in text
    assert (workspace / "dataset.jsonl").exists()

    text = _call("train_model", {"dataset": "dataset.jsonl", "name": "boot", "epochs": 2})
    assert "Run written to" in text
    assert (workspace / "boot" / "manifest.json").exists()
    _call("train_model", {"dataset": "dataset.jsonl", "name": "vanilla", "epochs": 2, "bootstrap": "off"})

    text = _call("report_runs", {"run_dirs": ["vanilla", "boot"]})
    assert "2 epochs aligned" in text
    curves = pd.read_csv(workspace / "report" / "report_curves.csv")
    assert "val_rmse_ratio" in curves.columns


def test_refine_and_sweep(workspace):
    _call("generate_dataset", {"n": 30, "particles": 3, "name": "small.jsonl"})
    text = _call("refine_baseline", {"dataset": "small.jsonl", "cycles": 2, "epochs": 2})
    assert "Refinement written to" in text
    assert len(pd.read_csv(workspace / "refine" / "error_table.csv")) == 2
    plan = json.loads((workspace / "refine" / "config.json").read_text())
    assert plan["z_threshold"] == pytest.approx(1.2816, abs=1e-4)

    text = _call("sweep_threshold", {"dataset": "small.jsonl", "grid": [1.0, 2.0], "epochs": 1})
    assert "Threshold sweep written to" in text
    assert list(pd.read_csv(workspace / "sweep" / "sweep.csv")["z_t"]) == [1.0, 2.0]


def test_errors_come_back_as_text(workspace):
    text = _call("train_model", {"dataset": "missing.jsonl", "epochs": 1})
    assert text.startswith("Error executing train_model")
    text = _call("train_model", {})
    assert text.startswith("Error executing train_model")
    text = _call("generate_dataset", {"n": 5, "noise_fraction": 1.5})
    assert text.startswith("Error executing generate_dataset")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
