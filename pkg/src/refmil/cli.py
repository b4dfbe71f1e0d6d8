"""Command-line entry points: gen-data, train, eval, heatmap.

Options resolve in three layers: built-in defaults, then a JSON --config
file, then explicit flags. Unknown config keys are rejected. Exit codes:
0 success, 2 usage or config error, 3 numeric failure, 4 artifact mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .comprehend import heatmap, write_heatmap
from .evaluate import evaluate_model
from .net import CHECKPOINT_VERSION, CheckpointError, NumericError, load_checkpoint, save_checkpoint
from .objectives import TrainConfig
from .scene import encode_expression, read_scenes, tokenize
from .synth import SynthConfig, write_dataset
from .train import train_model

log = logging.getLogger("refmil")

OBJECTIVE_NAMES = {
    "ml": "max_likelihood",
    "maxmargin": "max_margin",
    "mil-neg": "mil_neg",
    "mil-posneg": "mil_posneg",
}

POOL_NAMES = {"noisy-or": "noisy_or", "max": "max", "image-only": "image_only"}

# None marks a required option; everything else is the built-in default.
DEFAULTS = {
    "gen-data": {
        "seed": 0,
        "scenes": 100,
        "min_objects": 3,
        "max_objects": 5,
        "val_frac": 0.2,
        "expressions_per_scene": 4,
        "appearance_noise": 0.05,
        "out": None,
    },
    "train": {
        "objective": "mil-neg",
        "data": None,
        "out": None,
        "epochs": 30,
        "seed": 0,
        "hidden_dim": 64,
        "embed_dim": 64,
        "dropout": 0.5,
        "init_scale": 0.1,
        "lr": 0.01,
        "batch_size": 16,
        "halving_period": 50_000,
        "margin": 0.1,
        "lam": 1.0,
        "lam_n": 1.0,
        "lam_p": 1.0,
        "hard_negatives": 5,
        "train_contexts": 5,
        "test_contexts": 10,
        "min_count": 1,
    },
    "eval": {
        "ckpt": None,
        "data": None,
        "pool": "noisy-or",
        "threads": 1,
        "max_contexts": 10,
    },
    "heatmap": {
        "ckpt": None,
        "data": None,
        "scene_index": 0,
        "expr": None,
        "context_id": None,
        "box": None,
        "stride": 8.0,
        "out": None,
        "query_category": "",
    },
}


class UsageError(ValueError):
    pass


def _resolve(args: argparse.Namespace, command: str) -> dict:
    merged = dict(DEFAULTS[command])
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(merged))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        merged.update(doc)
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    missing = sorted(k for k, v in merged.items() if v is None)
    if missing:
        raise UsageError(f"missing required options for {command}: {', '.join(missing)}")
    return merged


def cmd_gen_data(args: argparse.Namespace) -> int:
    opts = _resolve(args, "gen-data")
    cfg = SynthConfig(
        seed=opts["seed"],
        n_scenes=opts["scenes"],
        min_objects=opts["min_objects"],
        max_objects=opts["max_objects"],
        appearance_noise=opts["appearance_noise"],
        expressions_per_scene=opts["expressions_per_scene"],
    )
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_val = write_dataset(
        cfg, out / "train.jsonl", out / "val.jsonl", val_fraction=opts["val_frac"]
    )
    log.info("wrote %d train / %d val scenes to %s", n_train, n_val, out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    opts = _resolve(args, "train")
    if opts["objective"] not in OBJECTIVE_NAMES:
        raise UsageError(f"objective must be one of {sorted(OBJECTIVE_NAMES)}")
    scenes = read_scenes(opts["data"])
    cfg = TrainConfig(
        objective=OBJECTIVE_NAMES[opts["objective"]],
        margin=opts["margin"],
        lam=opts["lam"],
        lam_n=opts["lam_n"],
        lam_p=opts["lam_p"],
        hard_negatives_per_expr=opts["hard_negatives"],
        context_samples_train=opts["train_contexts"],
        context_samples_test_max=opts["test_contexts"],
        epochs=opts["epochs"],
        rng_seed=opts["seed"],
    )
    log.info("config\t%s", json.dumps(opts, sort_keys=True))
    params, opt, _ = train_model(
        scenes,
        cfg,
        hidden_dim=opts["hidden_dim"],
        embed_dim=opts["embed_dim"],
        dropout_ratio=opts["dropout"],
        init_scale=opts["init_scale"],
        learning_rate=opts["lr"],
        halving_period_iters=opts["halving_period"],
        batch_size=opts["batch_size"],
        min_count=opts["min_count"],
    )
    save_checkpoint(params, opt, opts["out"])
    log.info("checkpoint written to %s", opts["out"])
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    opts = _resolve(args, "eval")
    if opts["pool"] not in POOL_NAMES:
        raise UsageError(f"pool must be one of {sorted(POOL_NAMES)}")
    params, _ = load_checkpoint(opts["ckpt"])
    scenes = read_scenes(opts["data"])
    if params.vocab is None or params.scaler is None:
        raise CheckpointError("checkpoint lacks vocabulary or scaler; cannot evaluate")
    dims = {r.appearance.shape[0] for s in scenes for r in s.regions}
    if len(dims) != 1 or 2 * (dims.pop() + 5) != params.scaler.dim:
        raise CheckpointError("dataset appearance features do not match the checkpoint")
    report = evaluate_model(
        params,
        scenes,
        mode=POOL_NAMES[opts["pool"]],
        max_contexts=opts["max_contexts"],
        threads=opts["threads"],
    )
    print(report.to_json())
    return 0


def _parse_box(text: str) -> tuple[float, float]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise UsageError(f"box must look like WxH, got {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError as exc:
        raise UsageError(f"box must look like WxH, got {text!r}") from exc


def cmd_heatmap(args: argparse.Namespace) -> int:
    opts = _resolve(args, "heatmap")
    params, _ = load_checkpoint(opts["ckpt"])
    if params.vocab is None or params.scaler is None:
        raise CheckpointError("checkpoint lacks vocabulary or scaler")
    scenes = read_scenes(opts["data"])
    if not (0 <= opts["scene_index"] < len(scenes)):
        raise UsageError(f"scene index {opts['scene_index']} out of range (0..{len(scenes) - 1})")
    scene = scenes[opts["scene_index"]]
    by_id = {r.id: r for r in scene.regions}
    if opts["context_id"] not in by_id:
        raise UsageError(f"no region with id {opts['context_id']} in scene {opts['scene_index']}")
    context = by_id[opts["context_id"]]
    query_appearance = None
    if opts["query_category"]:
        matches = [
            r.appearance for s in scenes for r in s.regions if r.category == opts["query_category"]
        ]
        if not matches:
            raise UsageError(f"no regions of category {opts['query_category']!r} in the dataset")
        query_appearance = np.mean(matches, axis=0)
    tokens = tokenize(opts["expr"])
    if not tokens:
        raise UsageError("expression is empty")
    enc = encode_expression(tokens, params.vocab)
    box = _parse_box(opts["box"])
    grid = heatmap(
        params,
        enc.tokens,
        context,
        scene.image,
        box_size=box,
        stride=opts["stride"],
        query_appearance=query_appearance,
    )
    write_heatmap(grid, scene.image, box, opts["stride"], opts["out"])
    log.info("wrote %dx%d grid to %s", grid.shape[0], grid.shape[1], opts["out"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refmil",
        description="Referring-expression comprehension: synthetic data, training, evaluation.",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"refmil {__version__} (checkpoint format {CHECKPOINT_VERSION})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--config", help="JSON file with option values")
    g.add_argument("--seed", type=int)
    g.add_argument("--scenes", type=int)
    g.add_argument("--min-objects", type=int, dest="min_objects")
    g.add_argument("--max-objects", type=int, dest="max_objects")
    g.add_argument("--val-frac", type=float, dest="val_frac")
    g.add_argument("--expressions-per-scene", type=int, dest="expressions_per_scene")
    g.add_argument("--appearance-noise", type=float, dest="appearance_noise")
    g.add_argument("--out", help="output directory for train.jsonl and val.jsonl")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a scene file")
    t.add_argument("--config")
    t.add_argument("--objective", choices=sorted(OBJECTIVE_NAMES))
    t.add_argument("--data", help="training scenes (jsonl)")
    t.add_argument("--out", help="checkpoint path to write")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    t.add_argument("--embed-dim", type=int, dest="embed_dim")
    t.add_argument("--dropout", type=float)
    t.add_argument("--init-scale", type=float, dest="init_scale")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--halving-period", type=int, dest="halving_period")
    t.add_argument("--margin", type=float)
    t.add_argument("--lam", type=float)
    t.add_argument("--lam-n", type=float, dest="lam_n")
    t.add_argument("--lam-p", type=float, dest="lam_p")
    t.add_argument("--hard-negatives", type=int, dest="hard_negatives")
    t.add_argument("--train-contexts", type=int, dest="train_contexts")
    t.add_argument("--test-contexts", type=int, dest="test_contexts")
    t.add_argument("--min-count", type=int, dest="min_count")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a scene file")
    e.add_argument("--config")
    e.add_argument("--ckpt")
    e.add_argument("--data")
    e.add_argument("--pool", choices=sorted(POOL_NAMES))
    e.add_argument("--threads", type=int)
    e.add_argument("--max-contexts", type=int, dest="max_contexts")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("heatmap", help="slide a query box against a fixed context region")
    h.add_argument("--config")
    h.add_argument("--ckpt")
    h.add_argument("--data")
    h.add_argument("--scene-index", type=int, dest="scene_index")
    h.add_argument("--expr", help="referring expression text")
    h.add_argument("--context-id", type=int, dest="context_id")
    h.add_argument("--box", help="query box size, WxH")
    h.add_argument("--stride", type=float)
    h.add_argument("--out", help="grid file to write")
    h.add_argument("--query-category", dest="query_category")
    h.set_defaults(func=cmd_heatmap)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return 4
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
