"""Command-line entry point: data generation, training, probing sweeps, selection, evaluation.

Flag values resolve as built-in default < environment (``.env``) < JSON
``--config`` file < argv. Every run writes ``manifest.json`` next to its
primary output (or to ``--manifest``) with the argv, the resolved flags, the
model config hash, package versions and the wall time; the wall time is the
only value that differs between identical reruns.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Any, Callable, Sequence

import matplotlib
import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, load_params, save_checkpoint
from .config import (
    CHANGE_RATE_THRESHOLD,
    DEFAULT_JOBS,
    DEFAULT_SEED,
    EVAL_SAMPLES,
    LOG_LEVEL,
    MAX_NEW_TOKENS,
)
from .errors import CheckpointFormatError, ContractError, WorkbenchError
from .harness import change_rate_sweep, drop_sweep, evaluate_counts
from .lora import DEFAULT_TARGETS, MASK_MODES, LoraAdapter, attach_lora, layer_mask_from_rates, layer_mask_from_report
from .model import ModelConfig
from .reports import read_change_rate_report, write_report
from .selection import STRATEGIES, profile_dataset, select, write_profiles, write_selection
from .taskgen import TASKS, CanvasSpec, answer_samples, export_jsonl, mixed_answer_samples, paired_samples, parse_task
from .train import TrainConfig, finetune_lora, train_base, write_metrics_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONTRACT = 2

# Flags each subcommand needs from argv or the --config file
REQUIRED_FLAGS: dict[str, tuple[str, ...]] = {
    "gen-data": ("out",),
    "train": ("out",),
    "probe-swap": ("ckpt", "task", "out"),
    "probe-drop": ("ckpt", "out"),
    "select": ("ckpt", "budget", "out"),
    "eval": ("ckpt", "out"),
    "finetune-lora": ("ckpt", "task", "out"),
}


# ---------------------------------------------------------------------------
# Flag helpers
# ---------------------------------------------------------------------------

def parse_int_list(text: str, all_values: Sequence[int]) -> list[int]:
    """``"all"`` or comma-separated integers."""
    text = str(text).strip()
    if text == "all":
        return list(all_values)
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ContractError(f"expected 'all' or comma-separated integers, got {text!r}") from None


def parse_tasks(text: str) -> list[str]:
    if str(text).strip() == "all":
        return [t.value for t in TASKS]
    return [parse_task(part.strip()).value for part in str(text).split(",") if part.strip()]


def _progress(label: str) -> Callable[[int, int], None]:
    def report(current: int, total: int) -> None:
        if current == total or current % max(1, total // 10) == 0:
            logger.info("%s: %d/%d", label, current, total)
    return report


def _model_config(args: argparse.Namespace) -> ModelConfig:
    return ModelConfig(
        n_layers=args.n_layers,
        d_model=args.d_model,
        n_heads=args.n_heads,
        d_ff=args.d_ff,
        image_size=args.image_size,
        channels=args.channels,
        patch_size=args.patch_size,
        max_seq=args.max_seq,
    )


def _load_model(args: argparse.Namespace):
    params = load_params(args.ckpt)
    adapter_path = getattr(args, "adapter", None)
    if adapter_path:
        adapter = load_checkpoint(adapter_path)
        if not isinstance(adapter, LoraAdapter):
            raise CheckpointFormatError(f"{adapter_path}: expected an adapter checkpoint")
        return attach_lora(params, adapter)
    return params


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args: argparse.Namespace) -> dict[str, Any]:
    canvas = CanvasSpec(args.image_size, args.channels, args.patch_size)
    samples = []
    for task in parse_tasks(args.task):
        samples.extend(paired_samples(task, args.samples, args.seed, canvas, flip_roles=args.flip_roles))
    export_jsonl(samples, args.out)
    return {"samples": len(samples)}


def _cmd_train(args: argparse.Namespace) -> dict[str, Any]:
    tasks = parse_tasks(args.tasks)
    config = TrainConfig(
        steps=args.steps,
        batch=args.batch,
        lr=args.lr,
        warmup=args.warmup,
        task_mix={t: 1.0 / len(tasks) for t in tasks},
        seed=args.seed,
        eval_every=args.eval_every,
        eval_samples=args.eval_samples,
        grad_clip=args.grad_clip,
        max_new=args.max_new,
    )
    result = train_base(config, _model_config(args), on_progress=_progress("train"))
    save_checkpoint(result.params, args.out)
    metrics_path = Path(args.metrics) if args.metrics else Path(args.out).with_suffix(".metrics.csv")
    write_metrics_csv(result.metrics, metrics_path)
    final = result.metrics[-1].accuracy if result.metrics else {}
    return {"config_hash": result.params.config.config_hash(), "final_accuracy": final, "train_config": config.to_dict()}


def _cmd_probe_swap(args: argparse.Namespace) -> dict[str, Any]:
    model = _load_model(args)
    config = model.config
    layers = parse_int_list(args.layers, range(config.n_layers))
    samples = paired_samples(args.task, args.samples, args.seed, CanvasSpec.from_config(config), flip_roles=args.flip_roles)
    report = change_rate_sweep(
        model, samples, layers,
        max_new=args.max_new, jobs=args.jobs, null_source=args.null_source, seed=args.seed,
        on_progress=_progress(f"probe-swap {args.task}"),
    )
    write_report(report, args.out, chart=args.chart)
    return {"config_hash": config.config_hash()}


def _cmd_probe_drop(args: argparse.Namespace) -> dict[str, Any]:
    model = _load_model(args)
    config = model.config
    ks = parse_int_list(args.drop_at, range(config.n_layers + 1))
    canvas = CanvasSpec.from_config(config)
    samples = []
    for task in parse_tasks(args.task):
        samples.extend(answer_samples(task, args.samples, args.seed, canvas))
    report = drop_sweep(
        model, samples, ks, max_new=args.max_new, jobs=args.jobs, seed=args.seed,
        on_progress=_progress(f"probe-drop {args.task}"),
    )
    write_report(report, args.out, chart=args.chart)
    return {"config_hash": config.config_hash()}


def _cmd_select(args: argparse.Namespace) -> dict[str, Any]:
    model = _load_model(args)
    config = model.config
    ks = parse_int_list(args.k_set, range(config.n_layers + 1))
    pool = mixed_answer_samples(args.pool, args.seed, parse_tasks(args.tasks), CanvasSpec.from_config(config))
    profiles = profile_dataset(model, pool, ks, jobs=args.jobs, on_progress=_progress("profile"))
    out = Path(args.out)
    profiles_path = Path(args.profiles) if args.profiles else out.with_name(out.stem + ".profiles.jsonl")
    write_profiles(profiles, profiles_path)
    selection = select(profiles, args.budget, args.seed, args.strategy)
    write_selection(selection, out)
    return {"config_hash": config.config_hash(), "selection": selection.to_manifest()}


def _cmd_eval(args: argparse.Namespace) -> dict[str, Any]:
    model = _load_model(args)
    config = model.config
    canvas = CanvasSpec.from_config(config)
    samples = []
    for task in parse_tasks(args.tasks):
        samples.extend(answer_samples(task, args.samples, args.seed, canvas))
    counts = evaluate_counts(model, samples, args.max_new, args.jobs, args.drop_at)
    result = {
        "config_hash": config.config_hash(),
        "drop_at": args.drop_at,
        "seed": args.seed,
        "tasks": {
            task: {"correct": c, "n": n, "accuracy": 100.0 * c / n}
            for task, (c, n) in counts.items()
        },
    }
    Path(args.out).write_text(json.dumps(result, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    for task, entry in result["tasks"].items():
        logger.info("%s: %.1f%% (%d/%d)", task, entry["accuracy"], entry["correct"], entry["n"])
    return {"config_hash": config.config_hash()}


def _cmd_finetune_lora(args: argparse.Namespace) -> dict[str, Any]:
    params = load_params(args.ckpt)
    config = params.config
    if args.report:
        report = read_change_rate_report(args.report)
        if report.config_hash != config.config_hash():
            logger.warning("Report %s was produced with config %s, checkpoint has %s",
                           args.report, report.config_hash, config.config_hash())
        mask = layer_mask_from_report(report, args.threshold, args.mask_mode)
    elif args.mask_layers:
        explicit = parse_int_list(args.mask_layers, range(config.n_layers))
        mask = layer_mask_from_rates({k: 100.0 for k in explicit}, config.n_layers, args.threshold, args.mask_mode)
    else:
        raise ContractError("finetune-lora needs --report or --mask-layers")

    targets = [t.strip() for t in args.targets.split(",") if t.strip()]
    adapter = LoraAdapter.create(config, mask, args.rank, args.alpha, targets, seed=args.seed)
    tasks = parse_tasks(args.task)
    train_config = TrainConfig(
        steps=args.steps,
        batch=args.batch,
        lr=args.lr,
        warmup=args.warmup,
        task_mix={t: 1.0 / len(tasks) for t in tasks},
        seed=args.seed,
        eval_every=args.eval_every,
        eval_samples=args.eval_samples,
        grad_clip=args.grad_clip,
        max_new=args.max_new,
    )
    result = finetune_lora(attach_lora(params, adapter), train_config, on_progress=_progress("finetune-lora"))
    save_checkpoint(result.adapter, args.out)
    metrics_path = Path(args.metrics) if args.metrics else Path(args.out).with_suffix(".metrics.csv")
    write_metrics_csv(result.metrics, metrics_path)
    return {
        "config_hash": config.config_hash(),
        "layer_mask": list(result.adapter.layer_mask),
        "trainable_parameters": result.trainable_parameters,
        "base_parameters": result.base_parameters,
        "trainable_fraction": result.trainable_fraction,
        "final_accuracy": result.metrics[-1].accuracy if result.metrics else {},
        "train_config": train_config.to_dict(),
    }


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file setting any flag of this subcommand")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--jobs", type=int, default=DEFAULT_JOBS, help="threads for per-sample evaluation")
    p.add_argument("--log-level", default=LOG_LEVEL)
    p.add_argument("--manifest", help="manifest path (default: manifest.json next to the output)")


def _add_canvas(p: argparse.ArgumentParser) -> None:
    defaults = ModelConfig()
    p.add_argument("--image-size", type=int, default=defaults.image_size)
    p.add_argument("--channels", type=int, default=defaults.channels)
    p.add_argument("--patch-size", type=int, default=defaults.patch_size)


def _add_optim(p: argparse.ArgumentParser, steps: int, lr: float, warmup: int) -> None:
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--warmup", type=int, default=warmup)
    p.add_argument("--eval-every", type=int, default=500)
    p.add_argument("--eval-samples", type=int, default=EVAL_SAMPLES)
    p.add_argument("--grad-clip", type=float, default=1.0)
    p.add_argument("--max-new", type=int, default=MAX_NEW_TOKENS)
    p.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vfl-workbench",
        description="Layer-wise vision-token swapping and dropping on a toy multimodal transformer.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write paired probing samples as JSON lines")
    _add_common(p)
    _add_canvas(p)
    p.add_argument("--task", default="all")
    p.add_argument("--samples", type=int, default=100, help="pairs per task")
    p.add_argument("--flip-roles", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("train", help="train the base model on the task mix")
    _add_common(p)
    _add_canvas(p)
    defaults = ModelConfig()
    p.add_argument("--n-layers", type=int, default=defaults.n_layers)
    p.add_argument("--d-model", type=int, default=defaults.d_model)
    p.add_argument("--n-heads", type=int, default=defaults.n_heads)
    p.add_argument("--d-ff", type=int, default=defaults.d_ff)
    p.add_argument("--max-seq", type=int, default=defaults.max_seq)
    p.add_argument("--tasks", default="all")
    _add_optim(p, steps=5000, lr=3e-4, warmup=200)
    p.add_argument("--out", help="checkpoint path")

    p = sub.add_parser("probe-swap", help="change rate of vision token swapping per layer")
    _add_common(p)
    p.add_argument("--ckpt")
    p.add_argument("--adapter")
    p.add_argument("--task", choices=[t.value for t in TASKS])
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--layers", default="all", help="'all' or comma-separated 0-based layers")
    p.add_argument("--null-source", action="store_true", help="swap in zero rows instead of the source image")
    p.add_argument("--flip-roles", action="store_true")
    p.add_argument("--max-new", type=int, default=MAX_NEW_TOKENS)
    p.add_argument("--chart", action="store_true", help="also write an SVG line chart")
    p.add_argument("--out", help=".json or .csv report")

    p = sub.add_parser("probe-drop", help="accuracy with vision tokens dropped from layer k")
    _add_common(p)
    p.add_argument("--ckpt")
    p.add_argument("--adapter")
    p.add_argument("--task", default="all")
    p.add_argument("--samples", type=int, default=EVAL_SAMPLES, help="samples per task")
    p.add_argument("--drop-at", default="all", help="'all' or comma-separated k in [0, L]")
    p.add_argument("--max-new", type=int, default=MAX_NEW_TOKENS)
    p.add_argument("--chart", action="store_true")
    p.add_argument("--out", help=".json or .csv report")

    p = sub.add_parser("select", help="profile relevance ratios and select a budgeted subset")
    _add_common(p)
    p.add_argument("--ckpt")
    p.add_argument("--adapter")
    p.add_argument("--pool", type=int, default=1000, help="pool size")
    p.add_argument("--tasks", default="all")
    p.add_argument("--k-set", default="all", help="'all' or comma-separated drop points")
    p.add_argument("--budget", type=int)
    p.add_argument("--strategy", choices=STRATEGIES, default="vfl")
    p.add_argument("--profiles", help="profiles JSONL (default: <out>.profiles.jsonl)")
    p.add_argument("--out", help="selected ids, one per line")

    p = sub.add_parser("eval", help="held-out accuracy per task")
    _add_common(p)
    p.add_argument("--ckpt")
    p.add_argument("--adapter")
    p.add_argument("--tasks", default="all")
    p.add_argument("--samples", type=int, default=EVAL_SAMPLES, help="samples per task")
    p.add_argument("--drop-at", type=int, default=None, help="evaluate with vision dropped from layer k")
    p.add_argument("--max-new", type=int, default=MAX_NEW_TOKENS)
    p.add_argument("--out", help="JSON results")

    p = sub.add_parser("finetune-lora", help="fine-tune a layer-masked LoRA adapter")
    _add_common(p)
    p.add_argument("--ckpt")
    p.add_argument("--report", help="change-rate report JSON to derive the layer mask from")
    p.add_argument("--mask-layers", help="explicit comma-separated layers instead of --report")
    p.add_argument("--threshold", type=float, default=CHANGE_RATE_THRESHOLD, help="change rate in percent")
    p.add_argument("--mask-mode", choices=MASK_MODES, default="vfl")
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--alpha", type=float, default=16.0)
    p.add_argument("--targets", default=",".join(DEFAULT_TARGETS))
    p.add_argument("--task", help="target task(s), comma-separated")
    _add_optim(p, steps=500, lr=1e-3, warmup=20)
    p.add_argument("--out", help="adapter checkpoint path")

    return parser


def _load_config_file(path: str) -> dict[str, Any]:
    try:
        overrides = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(overrides, dict):
        raise ContractError(f"{path}: expected a JSON object")
    normalized = {}
    for key, value in overrides.items():
        # lists stand in for comma-separated flags such as --layers or --task
        if isinstance(value, list):
            value = ",".join(str(item) for item in value)
        normalized[str(key).lstrip("-").replace("-", "_")] = value
    return normalized


def _apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """JSON ``--config`` values become subcommand defaults that argv still overrides.

    ``--config`` is read before the full parse so the file may also supply
    flags the subcommand needs (``--out``, ``--ckpt``, ...); those are checked
    once both sources are merged.
    """
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((token for token in argv if not token.startswith("-")), None)
    if known.config and command in REQUIRED_FLAGS:
        overrides = _load_config_file(known.config)
        subparser = _subparser(parser, command)
        accepted = {action.dest for action in subparser._actions} - {"help", "config"}
        unknown = sorted(set(overrides) - accepted)
        if unknown:
            raise ContractError(f"{known.config}: unsupported keys {unknown}")
        subparser.set_defaults(**overrides)

    args = parser.parse_args(argv)
    missing = [name for name in REQUIRED_FLAGS[args.command] if getattr(args, name) is None]
    if missing:
        flags = ", ".join("--" + name.replace("_", "-") for name in missing)
        raise ContractError(f"{args.command}: missing required flag(s) {flags} (argv or --config)")
    return args


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise ContractError(f"unknown subcommand {name!r}")


def _set_log_level(name: str) -> None:
    level = logging.getLevelName(str(name).upper())
    if not isinstance(level, int):
        raise ContractError(f"unknown log level {name!r}")
    logging.getLogger().setLevel(level)


def _versions() -> dict[str, str]:
    return {
        "matplotlib": matplotlib.__version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "vfl_workbench": __version__,
    }


def write_manifest(args: argparse.Namespace, argv: Sequence[str], extra: dict[str, Any], wall_time: float) -> Path:
    resolved = dict(sorted(vars(args).items()))
    manifest = {
        "argv": list(argv),
        "command": args.command,
        "resolved": resolved,
        "result": extra,
        "config_hash": extra.get("config_hash"),
        "versions": _versions(),
        "wall_time_s": round(wall_time, 3),
    }
    path = Path(args.manifest) if args.manifest else Path(args.out).resolve().parent / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2, default=str) + "\n", encoding="utf-8")
    logger.info("Wrote manifest %s", path)
    return path


def run(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    dispatcher = {
        "gen-data": _cmd_gen_data,
        "train": _cmd_train,
        "probe-swap": _cmd_probe_swap,
        "probe-drop": _cmd_probe_drop,
        "select": _cmd_select,
        "eval": _cmd_eval,
        "finetune-lora": _cmd_finetune_lora,
    }
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        _set_log_level(args.log_level)
        if args.jobs < 1:
            raise ContractError(f"--jobs must be >= 1, got {args.jobs}")
        started = time.perf_counter()
        extra = dispatcher[args.command](args)
        write_manifest(args, argv, extra, time.perf_counter() - started)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONTRACT
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (CheckpointFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except WorkbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())


__all__ = ["build_parser", "main", "parse_int_list", "parse_tasks", "run", "write_manifest"]
