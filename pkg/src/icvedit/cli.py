"""Command-line entry point for the full experiment lifecycle.

Subcommands: datagen, train, grad-check, edit, eval-proxy, eval-rater, report.
Values resolve as defaults < config file < explicit flags; the fully resolved
configuration is echoed into the output directory of every run. Config files
are flat TOML-style ``key = value`` text with ``#`` comments.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import (
    CheckpointError,
    ConfigError,
    NumericsError,
    RaterError,
    ShapeError,
    ShardError,
    TrainingError,
    UnsupportedTaskError,
    ValidationError,
)

_HANDLED_ERRORS = (
    ConfigError,
    ValidationError,
    ShapeError,
    ShardError,
    CheckpointError,
    TrainingError,
    NumericsError,
    RaterError,
    UnsupportedTaskError,
    FileNotFoundError,
    OSError,
)


@dataclass(frozen=True)
class _Opt:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple | None = None


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_paths(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _default_out(subcommand: str) -> str:
    root = os.environ.get("ICVEDIT_OUT", "out")
    return str(Path(root) / subcommand)


_COMMON = [
    _Opt("out", str, None, "output directory"),
    _Opt("deterministic", _parse_bool, False, "force single-threaded execution"),
]

_SPECS: dict[str, list[_Opt]] = {
    "datagen": _COMMON + [
        _Opt("seed", int, 0, "master seed"),
        _Opt("size", int, 64, "number of pairs (multiple of 4)"),
        _Opt("frames", int, 4, "video frames"),
        _Opt("height", int, 32, "video height in px"),
        _Opt("width", int, 32, "video width in px"),
        _Opt("name", str, "shard.rcvd", "shard file name"),
    ],
    "train": _COMMON + [
        _Opt("shard", _parse_paths, None, "shard path(s), comma-separated or repeated"),
        _Opt("steps", int, 200, "optimization steps"),
        _Opt("batch", int, 4, "batch size"),
        _Opt("seed", int, 0, "training seed"),
        _Opt("stage1_lr", float, 1e-4, "stage-1 learning rate"),
        _Opt("stage2_lr", float, 2e-5, "stage-2 learning rate"),
        _Opt("stage_boundary", int, -1, "step where stage 2 begins (-1 = halfway)"),
        _Opt("grad_clip", float, 1.0, "global gradient-norm clip"),
        _Opt("checkpoint_every", int, 0, "checkpoint interval (0 = final only)"),
        _Opt("ablation", str, "none", "loss ablation", choices=("none", "lc-", "ac-")),
        _Opt("lambda1", float, 1e-3, "latent-constraint weight"),
        _Opt("lambda2", float, 1e-3, "attention-constraint weight"),
        _Opt("region_mean_mode", str, "masked", "latent-loss mean mode",
             choices=("masked", "global")),
        _Opt("token_dim", int, 64, "model token dimension"),
        _Opt("heads", int, 4, "attention heads"),
        _Opt("depth", int, 4, "transformer blocks"),
        _Opt("lora_rank", int, 4, "low-rank adapter rank"),
        _Opt("max_frames", int, 8, "positional table size: frames"),
        _Opt("max_height", int, 16, "positional table size: rows"),
        _Opt("max_width", int, 16, "positional table size: single-video columns"),
        _Opt("codec_factor", int, 4, "pixel<->latent spatial factor"),
        _Opt("resume", str, "", "checkpoint to resume from"),
    ],
    "grad-check": _COMMON + [
        _Opt("seed", int, 0, "seed for the probe model and data"),
        _Opt("losses", str, "ic,latent,attn,full", "comma-separated loss selections"),
        _Opt("tolerance", float, 0.0, "fail (exit 1) if max rel error exceeds this (>0)"),
    ],
    "edit": _COMMON + [
        _Opt("checkpoint", str, None, "trained checkpoint path"),
        _Opt("source", str, "", "source video file (array-block container)"),
        _Opt("shard", str, "", "take the source video from this shard"),
        _Opt("index", int, 0, "pair index within --shard"),
        _Opt("task", str, "", "instruction task", choices=("", "add", "remove", "replace", "style")),
        _Opt("shape", str, "", "subject shape name"),
        _Opt("color", str, "", "subject color name"),
        _Opt("shape2", str, "", "replacement shape name (replace)"),
        _Opt("color2", str, "", "replacement color name (replace)"),
        _Opt("style", str, "", "style name (style task)"),
        _Opt("sampler_steps", int, 20, "Euler steps"),
        _Opt("sampler_seed", int, 0, "initial-noise seed"),
        _Opt("source_rectify", _parse_bool, True, "pin the source half to its schedule"),
        _Opt("codec_factor", int, 4, "pixel<->latent spatial factor"),
        _Opt("png", _parse_bool, False, "also export PNG frames"),
    ],
    "eval-proxy": _COMMON + [
        _Opt("checkpoint", str, None, "trained checkpoint path"),
        _Opt("shard", str, None, "evaluation shard"),
        _Opt("limit", int, 0, "max pairs to evaluate (0 = all)"),
        _Opt("sampler_steps", int, 20, "Euler steps"),
        _Opt("sampler_seed", int, 0, "initial-noise seed"),
        _Opt("codec_factor", int, 4, "pixel<->latent spatial factor"),
    ],
    "eval-rater": _COMMON + [
        _Opt("shard", str, None, "shard with (source, edited) pairs to rate"),
        _Opt("mock", _parse_bool, False, "use the bundled deterministic mock rater"),
        _Opt("endpoint", str, "", "remote rater URL (http POST)"),
        _Opt("seed", int, 0, "mock rater seed"),
        _Opt("limit", int, 0, "max pairs to rate (0 = all)"),
        _Opt("retries", int, 2, "extra attempts on transport failure"),
        _Opt("parallel", int, 1, "concurrent rating requests"),
    ],
    "report": _COMMON + [
        _Opt("scores", str, None, "scorecards JSONL file"),
    ],
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icvedit",
        description="desk-scale instructional video editing experiments",
    )
    parser.add_argument("--version", action="version", version="icvedit 0.1.0")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, opts in _SPECS.items():
        p = sub.add_parser(name, help=f"{name} stage")
        p.add_argument("--config", default=argparse.SUPPRESS, help="TOML-style key=value file")
        for opt in opts:
            flag = "--" + opt.name.replace("_", "-")
            kwargs: dict[str, Any] = {
                "default": argparse.SUPPRESS,
                "help": opt.help,
                "dest": opt.name,
            }
            if opt.type is _parse_bool:
                kwargs["type"] = _parse_bool
                kwargs["nargs"] = "?"
                kwargs["const"] = "true"
            elif opt.type is _parse_paths:
                kwargs["action"] = "append"
            else:
                kwargs["type"] = opt.type
            if opt.choices:
                kwargs["choices"] = [c for c in opt.choices]
                kwargs.pop("type", None)
            p.add_argument(flag, **kwargs)
    return parser


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip().strip('"').strip("'")
    return values


def _resolve(subcommand: str, args: argparse.Namespace) -> dict[str, Any]:
    spec = {opt.name: opt for opt in _SPECS[subcommand]}
    resolved: dict[str, Any] = {opt.name: opt.default for opt in _SPECS[subcommand]}
    config_path = getattr(args, "config", None)
    if config_path:
        for key, raw in _read_config_file(config_path).items():
            if key not in spec:
                raise ConfigError(f"unknown config key {key!r} for {subcommand}")
            opt = spec[key]
            try:
                resolved[key] = opt.type(raw)
            except _HANDLED_ERRORS:
                raise
            except Exception as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
            if opt.choices and resolved[key] not in opt.choices:
                raise ConfigError(f"{key!r} must be one of {opt.choices}, got {raw!r}")
    for key, value in vars(args).items():
        if key in spec:
            if isinstance(value, list) and value and isinstance(value[0], list):
                value = [p for chunk in value for p in chunk]
            resolved[key] = value
    if resolved.get("out") in (None, ""):
        resolved["out"] = _default_out(subcommand)
    return resolved


def _echo_config(resolved: dict[str, Any], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for key in sorted(resolved):
        value = resolved[key]
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, (int, float)):
            rendered = repr(value)
        elif isinstance(value, list):
            rendered = '"' + ",".join(str(v) for v in value) + '"'
        else:
            rendered = f'"{value}"'
        lines.append(f"{key} = {rendered}")
    (out_dir / "effective_config.toml").write_text("\n".join(lines) + "\n")


def _require(resolved: dict[str, Any], *keys: str) -> None:
    for key in keys:
        if resolved.get(key) in (None, "", []):
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")


def _apply_determinism(resolved: dict[str, Any]) -> None:
    if resolved.get("deterministic"):
        import torch

        torch.set_num_threads(1)


def _cmd_datagen(resolved: dict[str, Any], out_dir: Path) -> int:
    from .datagen import generate_shard_pairs, write_shard

    dims = (resolved["frames"], resolved["height"], resolved["width"])
    pairs = generate_shard_pairs(resolved["seed"], resolved["size"], dims)
    path = out_dir / resolved["name"]
    index = write_shard(pairs, path, master_seed=resolved["seed"])
    print(f"wrote {index.count} pairs to {path} (histogram {index.task_histogram})")
    return 0


def _train_config(resolved: dict[str, Any], out_dir: Path):
    from .losses import LossConfig
    from .model import ModelConfig
    from .trainer import TrainConfig

    ablation = resolved["ablation"]
    loss_cfg = LossConfig(
        lambda1=resolved["lambda1"],
        lambda2=resolved["lambda2"],
        region_mean_mode=resolved["region_mean_mode"],
        enable_latent=ablation != "lc-",
        enable_attn=ablation != "ac-",
    )
    model_cfg = ModelConfig(
        token_dim=resolved["token_dim"],
        heads=resolved["heads"],
        depth=resolved["depth"],
        lora_rank=resolved["lora_rank"],
        max_frames=resolved["max_frames"],
        max_height=resolved["max_height"],
        max_width=resolved["max_width"],
    )
    boundary = resolved["stage_boundary"]
    return TrainConfig(
        steps=resolved["steps"],
        batch=resolved["batch"],
        shard_paths=tuple(resolved["shard"]),
        out_dir=str(out_dir),
        stage1_lr=resolved["stage1_lr"],
        stage2_lr=resolved["stage2_lr"],
        stage_boundary=None if boundary < 0 else boundary,
        loss_cfg=loss_cfg,
        model_cfg=model_cfg,
        seed=resolved["seed"],
        grad_clip=resolved["grad_clip"],
        checkpoint_every=resolved["checkpoint_every"],
        codec_factor=resolved["codec_factor"],
        deterministic=resolved["deterministic"],
    )


def _cmd_train(resolved: dict[str, Any], out_dir: Path) -> int:
    from .trainer import run

    _require(resolved, "shard")
    cfg = _train_config(resolved, out_dir)
    report = run(cfg, resume_from=resolved["resume"] or None)
    print(f"trained {report['steps']} steps; final total {report['final_loss']['total']:.6f}")
    return 0


def _cmd_grad_check(resolved: dict[str, Any], out_dir: Path) -> int:
    from .trainer import grad_check

    losses = tuple(s.strip() for s in resolved["losses"].split(",") if s.strip())
    report = grad_check(losses=losses, seed=resolved["seed"])
    with open(out_dir / "grad_check.json", "w") as f:
        json.dump(report, f, indent=2)
    worst = 0.0
    for selection, groups in report.items():
        print(f"{selection}: max rel error {groups['max']:.3e}")
        worst = max(worst, groups["max"])
    tol = resolved["tolerance"]
    if tol > 0 and worst > tol:
        print(f"error: TrainingError: gradient check exceeded tolerance {tol}", file=sys.stderr)
        return 1
    return 0


def _parse_instruction(resolved: dict[str, Any], fallback=None):
    from .instructions import COLORS, Instruction, SHAPES, STYLES

    if not resolved["task"]:
        if fallback is None:
            raise ConfigError("no instruction given: set --task (and its arguments)")
        return fallback

    def shape_id(name):
        if name not in SHAPES:
            raise ConfigError(f"unknown shape {name!r}, expected one of {SHAPES}")
        return SHAPES.index(name)

    def color_id(name):
        if name not in COLORS:
            raise ConfigError(f"unknown color {name!r}, expected one of {COLORS}")
        return COLORS.index(name)

    task = resolved["task"]
    if task == "style":
        if resolved["style"] not in STYLES:
            raise ConfigError(f"unknown style {resolved['style']!r}, expected one of {STYLES}")
        return Instruction(task="style", style_id=STYLES.index(resolved["style"]))
    _require(resolved, "shape", "color")
    subject = (shape_id(resolved["shape"]), color_id(resolved["color"]))
    if task == "replace":
        _require(resolved, "shape2", "color2")
        return Instruction(
            task="replace", subject=subject,
            object2=(shape_id(resolved["shape2"]), color_id(resolved["color2"])),
        )
    return Instruction(task=task, subject=subject)


def _cmd_edit(resolved: dict[str, Any], out_dir: Path) -> int:
    from .editor import EditRequest, edit_video, read_video_file, write_video_file
    from .flow import SamplerConfig

    _require(resolved, "checkpoint")
    if resolved["shard"]:
        from .datagen import read_shard

        pairs = read_shard(resolved["shard"])
        if not 0 <= resolved["index"] < len(pairs):
            raise ConfigError(f"--index {resolved['index']} out of range (shard has {len(pairs)})")
        pair = pairs[resolved["index"]]
        source = pair.source
        instruction = _parse_instruction(resolved, fallback=pair.instruction)
    elif resolved["source"]:
        source = read_video_file(resolved["source"])
        instruction = _parse_instruction(resolved)
    else:
        raise ConfigError("set either --source or --shard/--index")
    sampler = SamplerConfig(
        steps=resolved["sampler_steps"],
        source_rectify=resolved["source_rectify"],
        seed=resolved["sampler_seed"],
    )
    request = EditRequest(
        source=source,
        instruction=instruction,
        checkpoint_path=resolved["checkpoint"],
        sampler=sampler,
        codec_factor=resolved["codec_factor"],
    )
    edited = edit_video(request)
    out_path = out_dir / "edited.rcv"
    write_video_file(edited, out_path)
    if resolved["png"]:
        from .reporting import export_png_frames

        export_png_frames(edited, out_dir / "frames")
    from .instructions import instruction_text

    print(f"edited video written to {out_path} ({instruction_text(instruction)})")
    return 0


def _cmd_eval_proxy(resolved: dict[str, Any], out_dir: Path) -> int:
    from .datagen import read_shard
    from .editor import edit_with_model
    from .flow import SamplerConfig
    from .scoring import proxy_metrics
    from .trainer import load_model

    _require(resolved, "checkpoint", "shard")
    pairs = read_shard(resolved["shard"])
    if resolved["limit"]:
        pairs = pairs[: resolved["limit"]]
    model, _ = load_model(resolved["checkpoint"])
    model.eval()
    sampler = SamplerConfig(steps=resolved["sampler_steps"], seed=resolved["sampler_seed"])
    records = []
    with open(out_dir / "metrics.jsonl", "w") as f:
        for i, pair in enumerate(pairs):
            edited = edit_with_model(
                model, pair.source, pair.instruction, sampler, resolved["codec_factor"]
            )
            metrics = proxy_metrics(pair.source, edited, pair.target, pair.pixel_mask)
            record = {"index": i, "task": pair.task, **metrics.to_dict()}
            records.append(record)
            f.write(json.dumps(record) + "\n")
    summary: dict[str, dict[str, float]] = {}
    for task in sorted({r["task"] for r in records}):
        rows = [r for r in records if r["task"] == task]
        summary[task] = {
            key: sum(r[key] for r in rows) / len(rows)
            for key in ("edit_change", "background_error", "gt_compliance", "flicker")
        }
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_eval_rater(resolved: dict[str, Any], out_dir: Path) -> int:
    from concurrent.futures import ThreadPoolExecutor

    from .datagen import read_shard
    from .scoring import MockRater, rate_remote, write_scorecards

    _require(resolved, "shard")
    if not resolved["mock"] and not resolved["endpoint"]:
        raise ConfigError("set --mock or --endpoint")
    pairs = read_shard(resolved["shard"])
    if resolved["limit"]:
        pairs = pairs[: resolved["limit"]]

    def rate_one(item):
        i, pair = item
        if resolved["mock"]:
            return MockRater(resolved["seed"]).rate(pair.task, str(i))
        return rate_remote(
            resolved["endpoint"],
            pair.task,
            str(i),
            pair.source.values,
            pair.target.values,
            retries=resolved["retries"],
        )

    items = list(enumerate(pairs))
    if resolved["parallel"] > 1:
        with ThreadPoolExecutor(max_workers=resolved["parallel"]) as pool:
            cards = list(pool.map(rate_one, items))
    else:
        cards = [rate_one(item) for item in items]
    cards.sort(key=lambda c: (c.task, int(c.sample_id)))
    path = out_dir / "scorecards.jsonl"
    write_scorecards(cards, path)
    print(f"wrote {len(cards)} scorecards to {path}")
    return 0


def _cmd_report(resolved: dict[str, Any], out_dir: Path) -> int:
    from .reporting import render_text_table, write_benchmark_report
    from .scoring import aggregate_benchmark, read_scorecards

    _require(resolved, "scores")
    cards = read_scorecards(resolved["scores"])
    table = aggregate_benchmark(cards)
    paths = write_benchmark_report(table, out_dir)
    print(render_text_table(table), end="")
    print(f"report written to {paths['json']}, {paths['csv']}, figure {paths['figure']}")
    return 0


_COMMANDS = {
    "datagen": _cmd_datagen,
    "train": _cmd_train,
    "grad-check": _cmd_grad_check,
    "edit": _cmd_edit,
    "eval-proxy": _cmd_eval_proxy,
    "eval-rater": _cmd_eval_rater,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        resolved = _resolve(args.subcommand, args)
        out_dir = Path(resolved["out"])
        _echo_config(resolved, out_dir)
        _apply_determinism(resolved)
        return _COMMANDS[args.subcommand](resolved, out_dir)
    except _HANDLED_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
