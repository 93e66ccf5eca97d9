"""Command-line entry points: train, eval, ablate, make-toy-data."""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import yaml

from .config import ConfigError, config_from_dict, config_to_dict, load_config, \
    merge_overrides
from .data import load_dataset, make_toy_dataset
from .trainer import build_trainer, evaluate, load_checkpoint, model_from_checkpoint


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    cfg.validate()
    trainer = build_trainer(cfg)
    summary = trainer.train()
    print(json.dumps(summary))
    return 0


def _cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    model, cfg = model_from_checkpoint(state)
    root = Path(args.dataset)
    manifest = root / args.manifest
    dataset = load_dataset(root, manifest, cfg.data.class_count,
                           ignore_index=cfg.data.ignore_index)
    miou, ious = evaluate(model, dataset)
    summary = {"miou": miou, "per_class_iou": ious, "n_images": len(dataset),
               "checkpoint": str(args.checkpoint)}
    print(json.dumps(summary))
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return 0


def _cmd_ablate(args) -> int:
    """Run the base config once per grid entry and compare best val mIoU."""
    base = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
    grid = yaml.safe_load(Path(args.grid).read_text(encoding="utf-8"))
    if not isinstance(grid, list):
        raise ConfigError(f"{args.grid}: grid file must be a list of runs")
    results = []
    for i, entry in enumerate(grid):
        name = entry.get("name", f"run{i}")
        raw = merge_overrides(base, entry.get("overrides", {}))
        cfg = config_from_dict(raw)
        cfg.out_dir = str(Path(cfg.out_dir) / name)
        if args.seed is not None:
            cfg.seed = args.seed
        trainer = build_trainer(cfg)
        summary = trainer.train(quiet=True)
        results.append({"name": name, **summary,
                        "overrides": entry.get("overrides", {})})
        print(f"{name}: best mIoU {summary['best_miou']:.4f}")
    out = Path(config_from_dict(base).out_dir) / "ablation.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(results, indent=2), encoding="utf-8")
    print(json.dumps(results))
    return 0


def _cmd_make_toy_data(args) -> int:
    manifest = make_toy_dataset(args.out, class_count=args.classes, n=args.n,
                                seed=args.seed, size=args.size)
    print(f"wrote {args.n} images, manifest at {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segbank",
                                description="semi-supervised segmentation trainer")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run training from a YAML config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--deterministic", action="store_true")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, help="dataset root directory")
    e.add_argument("--manifest", default="manifest.txt")
    e.add_argument("--out", default=None, help="optional JSON output path")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="run a grid of config overrides")
    a.add_argument("--config", required=True)
    a.add_argument("--grid", required=True)
    a.add_argument("--seed", type=int, default=None)
    a.set_defaults(func=_cmd_ablate)

    m = sub.add_parser("make-toy-data", help="render a synthetic shapes dataset")
    m.add_argument("--out", required=True)
    m.add_argument("--classes", type=int, default=3)
    m.add_argument("--n", type=int, default=200)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--size", type=int, default=64)
    m.set_defaults(func=_cmd_make_toy_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
