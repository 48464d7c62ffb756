from __future__ import annotations

import json

import pytest

from conftest import TINY
from vfl_workbench.checkpoint import load_checkpoint, load_params, save_checkpoint
from vfl_workbench.cli import EXIT_CONTRACT, EXIT_IO, EXIT_OK, parse_int_list, parse_tasks, run
from vfl_workbench.errors import ContractError
from vfl_workbench.lora import LoraAdapter
from vfl_workbench.model import Params
from vfl_workbench.taskgen import load_jsonl

TRAIN_FLAGS = [
    "--n-layers", "2", "--d-model", "16", "--n-heads", "2", "--d-ff", "32", "--max-seq", "48",
    "--steps", "2", "--batch", "2", "--eval-every", "1", "--eval-samples", "0",
]


@pytest.fixture
def ckpt(tmp_path):
    path = tmp_path / "tiny.ckpt"
    save_checkpoint(Params.initialize(TINY, seed=0), path)
    return path


def _manifest(directory):
    return json.loads((directory / "manifest.json").read_text(encoding="utf-8"))


def test_parse_int_list():
    assert parse_int_list("all", range(3)) == [0, 1, 2]
    assert parse_int_list("2, 0", range(3)) == [2, 0]
    with pytest.raises(ContractError):
        parse_int_list("1,x", range(3))


def test_parse_tasks():
    assert parse_tasks("all") == ["ocr", "grounding", "count", "recognition"]
    assert parse_tasks("count,ocr") == ["count", "ocr"]
    with pytest.raises(ContractError):
        parse_tasks("count,colour")


def test_gen_data_writes_samples_and_manifest(tmp_path):
    out = tmp_path / "pairs.jsonl"
    assert run(["gen-data", "--task", "count,ocr", "--samples", "2", "--seed", "3", "--out", str(out)]) == EXIT_OK
    pairs = load_jsonl(out)
    assert [p.task.value for p in pairs] == ["count", "count", "ocr", "ocr"]
    manifest = _manifest(tmp_path)
    assert manifest["command"] == "gen-data"
    assert manifest["resolved"]["seed"] == 3
    assert manifest["result"] == {"samples": 4}
    assert set(manifest["versions"]) >= {"numpy", "matplotlib", "python"}


def test_config_file_sits_between_defaults_and_argv(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"samples": 3, "seed": 9, "flip-roles": True}), encoding="utf-8")
    out = tmp_path / "pairs.jsonl"
    argv = ["gen-data", "--task", "count", "--config", str(config), "--seed", "1", "--out", str(out)]
    assert run(argv) == EXIT_OK
    resolved = _manifest(tmp_path)["resolved"]
    assert resolved["samples"] == 3
    assert resolved["flip_roles"] is True
    assert resolved["seed"] == 1
    assert len(load_jsonl(out)) == 3


def test_config_file_rejects_unknown_keys(tmp_path, capsys):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"sampels": 3}), encoding="utf-8")
    argv = ["gen-data", "--config", str(config), "--out", str(tmp_path / "x.jsonl")]
    assert run(argv) == EXIT_CONTRACT
    assert "sampels" in capsys.readouterr().err


def test_config_file_can_supply_required_flags_and_lists(tmp_path, ckpt):
    out = tmp_path / "swap.csv"
    config = tmp_path / "swap.json"
    config.write_text(json.dumps({
        "ckpt": str(ckpt), "task": "count", "out": str(out),
        "samples": 1, "layers": [2, 0], "max-new": 2,
    }), encoding="utf-8")
    assert run(["probe-swap", "--config", str(config)]) == EXIT_OK
    lines = out.read_text(encoding="utf-8").splitlines()
    assert [line.split(",")[1] for line in lines[1:]] == ["baseline", "0", "2"]
    resolved = _manifest(tmp_path)["resolved"]
    assert resolved["ckpt"] == str(ckpt) and resolved["layers"] == "2,0"


def test_argv_overrides_required_flags_from_config(tmp_path, ckpt):
    config = tmp_path / "drop.json"
    config.write_text(json.dumps({
        "ckpt": str(ckpt), "out": str(tmp_path / "from_config.csv"),
        "task": ["count"], "samples": 1, "drop-at": [0, 3], "max-new": 2,
    }), encoding="utf-8")
    out = tmp_path / "from_argv.csv"
    assert run(["probe-drop", "--config", str(config), "--out", str(out)]) == EXIT_OK
    assert not (tmp_path / "from_config.csv").exists()
    lines = out.read_text(encoding="utf-8").splitlines()
    assert [line.split(",")[:2] for line in lines[1:]] == [["count", "baseline"], ["count", "0"], ["count", "3"]]


def test_missing_required_flags_are_named(tmp_path, ckpt, capsys):
    assert run(["probe-swap", "--ckpt", str(ckpt), "--task", "count"]) == EXIT_CONTRACT
    assert "--out" in capsys.readouterr().err
    config = tmp_path / "partial.json"
    config.write_text(json.dumps({"out": str(tmp_path / "subset.txt")}), encoding="utf-8")
    assert run(["select", "--config", str(config), "--ckpt", str(ckpt)]) == EXIT_CONTRACT
    assert "--budget" in capsys.readouterr().err
    assert not (tmp_path / "manifest.json").exists()


def test_usage_errors_exit_with_contract_code(tmp_path):
    out = str(tmp_path / "x.jsonl")
    assert run(["gen-data"]) == EXIT_CONTRACT
    assert run(["gen-data", "--out", out, "--jobs", "0"]) == EXIT_CONTRACT
    assert run(["gen-data", "--out", out, "--log-level", "chatty"]) == EXIT_CONTRACT
    assert run(["gen-data", "--out", out, "--task", "colour"]) == EXIT_CONTRACT


def test_swap_command_end_to_end(tmp_path, ckpt):
    out = tmp_path / "swap.csv"
    argv = ["probe-swap", "--ckpt", str(ckpt), "--task", "count", "--samples", "2",
            "--layers", "0,2", "--max-new", "2", "--chart", "--out", str(out)]
    assert run(argv) == EXIT_OK
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "task,layer,n,changed,rate"
    assert lines[1] == "count,baseline,2,0,0.00"
    assert [line.split(",")[1] for line in lines[2:]] == ["0", "2"]
    assert (tmp_path / "swap.svg").exists()
    assert _manifest(tmp_path)["config_hash"] == TINY.config_hash()


def test_swap_command_reruns_are_identical(tmp_path, ckpt):
    out = tmp_path / "swap.json"
    argv = ["probe-swap", "--ckpt", str(ckpt), "--task", "grounding", "--samples", "2",
            "--layers", "1", "--max-new", "2", "--out", str(out)]
    assert run(argv) == EXIT_OK
    first_report, first_manifest = out.read_bytes(), _manifest(tmp_path)
    assert run(argv + ["--jobs", "2"]) == EXIT_OK
    assert out.read_bytes() == first_report
    second_manifest = _manifest(tmp_path)
    for manifest in (first_manifest, second_manifest):
        manifest.pop("wall_time_s")
        manifest.pop("argv")
        manifest["resolved"].pop("jobs")
    assert first_manifest == second_manifest


def test_swap_command_rejects_bad_layer(tmp_path, ckpt, capsys):
    argv = ["probe-swap", "--ckpt", str(ckpt), "--task", "count", "--samples", "1",
            "--layers", "7", "--out", str(tmp_path / "swap.csv")]
    assert run(argv) == EXIT_CONTRACT
    assert "error:" in capsys.readouterr().err


def test_missing_and_corrupt_checkpoints(tmp_path):
    out = str(tmp_path / "swap.csv")
    assert run(["probe-swap", "--ckpt", str(tmp_path / "nope.ckpt"), "--task", "count", "--out", out]) == EXIT_IO
    corrupt = tmp_path / "corrupt.ckpt"
    corrupt.write_bytes(b"VFLCKPT1\x10\x00")
    assert run(["probe-swap", "--ckpt", str(corrupt), "--task", "count", "--out", out]) == EXIT_IO


def test_drop_command_end_to_end(tmp_path, ckpt):
    out = tmp_path / "drop.csv"
    argv = ["probe-drop", "--ckpt", str(ckpt), "--task", "count,recognition", "--samples", "1",
            "--drop-at", "0,3", "--max-new", "2", "--out", str(out)]
    assert run(argv) == EXIT_OK
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "task,k,layers_omitted,n,correct,accuracy"
    assert [line.split(",")[:3] for line in lines[1:]] == [
        ["count+recognition", "baseline", "0"],
        ["count+recognition", "0", "3"],
        ["count+recognition", "3", "0"],
    ]
    assert lines[1].split(",")[3:] == lines[3].split(",")[3:]


def test_eval_end_to_end(tmp_path, ckpt):
    out = tmp_path / "eval.json"
    argv = ["eval", "--ckpt", str(ckpt), "--tasks", "count", "--samples", "2", "--max-new", "2", "--out", str(out)]
    assert run(argv) == EXIT_OK
    result = json.loads(out.read_text(encoding="utf-8"))
    assert result["tasks"]["count"]["n"] == 2
    assert result["drop_at"] is None


def test_select_end_to_end(tmp_path, ckpt):
    out = tmp_path / "subset.txt"
    argv = ["select", "--ckpt", str(ckpt), "--pool", "4", "--tasks", "count", "--k-set", "0,1,3",
            "--budget", "2", "--out", str(out)]
    assert run(argv) == EXIT_OK
    assert len(out.read_text(encoding="utf-8").split()) == 2
    assert len((tmp_path / "subset.profiles.jsonl").read_text(encoding="utf-8").splitlines()) == 4
    manifest = json.loads((tmp_path / "subset.selection.json").read_text(encoding="utf-8"))
    assert manifest["budget"] == 2


def test_select_budget_over_pool_is_a_contract_error(tmp_path, ckpt):
    argv = ["select", "--ckpt", str(ckpt), "--pool", "2", "--tasks", "count", "--budget", "5",
            "--out", str(tmp_path / "subset.txt")]
    assert run(argv) == EXIT_CONTRACT


def test_train_then_finetune_then_eval(tmp_path):
    base = tmp_path / "base.ckpt"
    assert run(["train", *TRAIN_FLAGS, "--tasks", "count", "--seed", "4", "--out", str(base)]) == EXIT_OK
    params = load_params(base)
    assert params.config.n_layers == 2
    assert (tmp_path / "base.metrics.csv").read_text(encoding="utf-8").startswith("step,loss")

    report = tmp_path / "swap.json"
    assert run(["probe-swap", "--ckpt", str(base), "--task", "count", "--samples", "2",
                "--max-new", "2", "--out", str(report)]) == EXIT_OK

    adapter = tmp_path / "adapter.ckpt"
    argv = ["finetune-lora", "--ckpt", str(base), "--mask-layers", "1", "--task", "count", "--rank", "2",
            "--steps", "2", "--batch", "2", "--eval-every", "1", "--eval-samples", "0", "--out", str(adapter)]
    assert run(argv) == EXIT_OK
    loaded = load_checkpoint(adapter)
    assert isinstance(loaded, LoraAdapter) and loaded.layer_mask == (1,)
    assert _manifest(tmp_path)["result"]["layer_mask"] == [1]

    argv = ["finetune-lora", "--ckpt", str(base), "--report", str(report), "--mask-mode", "full", "--task", "count",
            "--rank", "2", "--steps", "1", "--batch", "2", "--eval-samples", "0", "--out", str(tmp_path / "full.ckpt")]
    assert run(argv) == EXIT_OK
    assert load_checkpoint(tmp_path / "full.ckpt").layer_mask == (0, 1)

    out = tmp_path / "eval.json"
    assert run(["eval", "--ckpt", str(base), "--adapter", str(adapter), "--tasks", "count", "--samples", "1",
                "--max-new", "2", "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text(encoding="utf-8"))["tasks"]["count"]["n"] == 1


def test_train_is_reproducible(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    assert run(["train", *TRAIN_FLAGS, "--tasks", "ocr", "--out", str(a)]) == EXIT_OK
    assert run(["train", *TRAIN_FLAGS, "--tasks", "ocr", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_finetune_needs_a_mask_source(tmp_path, ckpt):
    argv = ["finetune-lora", "--ckpt", str(ckpt), "--task", "count", "--out", str(tmp_path / "a.ckpt")]
    assert run(argv) == EXIT_CONTRACT


def test_adapter_in_place_of_base_is_an_io_error(tmp_path):
    path = tmp_path / "adapter.ckpt"
    save_checkpoint(LoraAdapter.create(TINY, [0]), path)
    argv = ["eval", "--ckpt", str(path), "--tasks", "count", "--samples", "1", "--out", str(tmp_path / "e.json")]
    assert run(argv) == EXIT_IO
