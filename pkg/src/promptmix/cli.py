"""Command-line experiment runner.

Stages mirror the artifact pipeline: gen-data, train-backbone, warmstart,
stats, attack-cache, evaluate, sweep, report, verify. Each stage builds
missing upstream artifacts on demand, so any stage can be run standalone;
everything is a deterministic function of the config file plus --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import save_arrays
from .data import DOWNSTREAM_CLASSES, PUBLIC_CLASSES
from .harness import (ConfigError, ExperimentConfig, Workspace, config_to_dict,
                      evaluate_cell, load_config, render_report, run_sweep,
                      verify_results)


def _load(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _workspace(args) -> Workspace:
    cfg = _load(args)
    quiet = getattr(args, "quiet", False)
    ws = Workspace(cfg, args.workdir, log=(lambda *_: None) if quiet else print)
    ws.snapshot_config()
    return ws


def cmd_gen_data(args):
    ws = _workspace(args)
    ds = ws.dataset()
    path = ws.path("data", "dataset.ckpt")
    save_arrays(path, {
        "train_images": ds.train_images,
        "train_labels": ds.train_labels.astype(np.float64),
        "heldout_images": ds.heldout_images,
        "heldout_labels": ds.heldout_labels.astype(np.float64),
    }, {"kind": "dataset", "seed": ds.seed,
        "public_classes": list(PUBLIC_CLASSES), "downstream_classes": list(DOWNSTREAM_CLASSES)})
    print(f"dataset: {len(ds.train_images)} train / {len(ds.heldout_images)} heldout -> {path}")
    return 0


def cmd_train_backbone(args):
    ws = _workspace(args)
    ws.ensure_backbone()
    ws.ensure_backbone("surrogate")
    print(f"backbone + surrogate ready under {ws.root / 'checkpoints'}")
    return 0


def cmd_warmstart(args):
    ws = _workspace(args)
    depth = max(1, ws.cfg.defense.prompt_depth)
    designs = [args.design] if args.design else [ws.cfg.defense.design]
    for design in designs:
        ws.ensure_prompt(design, depth, adversarial=True)
        ws.ensure_prompt(design, depth, adversarial=False)
    print("warm-start prompts ready")
    return 0


def cmd_stats(args):
    ws = _workspace(args)
    depth = max(1, ws.cfg.defense.prompt_depth)
    design = args.design or ws.cfg.defense.design
    eps = ws.cfg.attack.epsilon if ws.cfg.attack.variant != "none" else ws.cfg.pretrain.epsilon
    ws.ensure_references(design, depth, eps)
    print("reference statistics ready")
    return 0


def cmd_attack_cache(args):
    ws = _workspace(args)
    d = ws.cfg.defense
    ws.ensure_attack_cache(ws.cfg.attack, d.design, max(1, d.prompt_depth))
    print("attack cache ready")
    return 0


def cmd_evaluate(args):
    ws = _workspace(args)
    name = args.cell or "default"
    out_dir = ws.path("runs", "single", name)
    summary = evaluate_cell(ws, ws.cfg, name, out_dir)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args):
    ws = _workspace(args)
    axis = args.axis or (ws.cfg.sweep or {}).get("axis")
    if not axis:
        print("error: no sweep axis given (use --axis or config sweep.axis)", file=sys.stderr)
        return 2
    values = (ws.cfg.sweep or {}).get("values") if not args.axis else None
    aggregate = run_sweep(ws, axis, values=values, workers=args.workers)
    print(json.dumps(aggregate, indent=2, sort_keys=True))
    return 1 if aggregate["failures"] else 0


def cmd_report(args):
    print(render_report(args.workdir))
    return 0


def cmd_verify(args):
    cfg = _load(args)
    problems = verify_results(args.workdir, cfg.seed)
    if problems:
        print("verification FAILED:")
        for p in problems:
            print(f"  {p}")
        return 1
    print("verification OK: every summary matches its per-sample CSV")
    return 0


def cmd_show_config(args):
    cfg = _load(args)
    print(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptmix",
        description="Test-time prompt-mixture defense experiments on the toy dual encoder.")
    parser.add_argument("--workdir", default="results", help="artifact/result directory")
    parser.add_argument("--config", default=None, help="experiment config JSON")
    parser.add_argument("--quiet", action="store_true", help="suppress progress logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, seed_required=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, required=seed_required,
                       help="root seed" + (" (required)" if seed_required else " override"))
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "generate and store the synthetic dataset")
    add("train-backbone", cmd_train_backbone, "train and freeze the backbone and surrogate")
    p = add("warmstart", cmd_warmstart, "pretrain robust and clean prompts on the public split")
    p.add_argument("--design", choices=["v", "vlj", "vli"], default=None)
    p = add("stats", cmd_stats, "precompute reference layer statistics")
    p.add_argument("--design", choices=["v", "vlj", "vli"], default=None)
    add("attack-cache", cmd_attack_cache, "generate and cache adversarial eval images")
    p = add("evaluate", cmd_evaluate, "run one evaluation cell", seed_required=True)
    p.add_argument("--cell", default=None, help="cell name for the results directory")
    p = add("sweep", cmd_sweep, "run a sweep axis", seed_required=True)
    p.add_argument("--axis", default=None,
                   help="sweep axis (steps, epsilon, experts, depth, prompt_len, "
                        "align_layers, reset, design, loss_ablation)")
    p.add_argument("--workers", type=int, default=1, help="parallel cells")
    add("report", cmd_report, "render tables from a results directory")
    add("verify", cmd_verify, "re-aggregate CSVs and check the summaries")
    add("show-config", cmd_show_config, "print the resolved config")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
