"""Experiment orchestration: artifact building, evaluation cells, sweeps.

Every artifact (backbone, prompts, references, attack caches) is a pure
function of the experiment config and its single seed; ``ensure_*``
helpers build missing artifacts idempotently so each CLI stage can run
standalone or as part of a sweep. All run output is machine-readable:
one CSV row per sample, one summary JSON per cell, one aggregate table
per sweep axis.
"""

from __future__ import annotations

import csv
import json
import math
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, run_attack
from .checkpoint import sha256_file
from .data import DOWNSTREAM_CLASSES, PUBLIC_CLASSES, generate_dataset
from .engine import (DefenseConfig, DefenseEngine, PretrainConfig, ReferenceStatistics,
                     SinglePrompt, build_bank, precompute_references, pretrain_prompt)
from .model import DualEncoder, ModelConfig, train_backbone
from .util import derive_seed


class ConfigError(ValueError):
    def __init__(self, fld: str, message: str):
        super().__init__(f"config field {fld!r}: {message}")
        self.field = fld


def _epsilon_value(raw) -> float:
    """Accept a float or an 'a/b' string such as '4/255'."""
    if isinstance(raw, str):
        num, _, den = raw.partition("/")
        try:
            return float(num) / float(den) if den else float(num)
        except ValueError:
            raise ConfigError("attack.epsilon", f"cannot parse {raw!r}") from None
    return float(raw)


def eps_tag(eps: float) -> str:
    n = eps * 255.0
    if abs(n - round(n)) < 1e-9:
        return f"{int(round(n))}of255"
    return f"{eps:.6g}".replace(".", "p")


@dataclass
class AttackSpec:
    variant: str = "pgd"          # none | pgd | cw | di
    epsilon: float = 4 / 255
    steps: int = 100
    step_size: float | None = None
    random_start: bool = True
    di_prob: float = 0.5
    adaptive: bool = False        # attack sees the warm prompts (experiment switch)

    def to_config(self) -> AttackConfig:
        return AttackConfig(epsilon=self.epsilon, steps=self.steps,
                            step_size=self.step_size, variant=self.variant,
                            random_start=self.random_start, di_prob=self.di_prob)


@dataclass
class EvalSpec:
    num_samples: int = 500
    bootstrap_resamples: int = 1000
    stats_samples: int = 1000     # public images behind the reference statistics


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: dict = field(default_factory=lambda: {"train_per_class": 500, "heldout_per_class": 100})
    model: ModelConfig = field(default_factory=ModelConfig)
    backbone: dict = field(default_factory=dict)   # train_backbone overrides
    attack: AttackSpec = field(default_factory=AttackSpec)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    defense_mode: str = "tta"     # none | tta
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    sweep: dict | None = None     # {"axis": name, "values": [...]} or None

    def validate(self) -> "ExperimentConfig":
        if self.seed is None:
            raise ConfigError("seed", "a seed is required")
        if self.attack.variant not in ("none", "pgd", "cw", "di"):
            raise ConfigError("attack.variant", f"unknown value {self.attack.variant!r}")
        if self.attack.variant != "none":
            try:
                self.attack.to_config()
            except ValueError as e:
                raise ConfigError("attack", str(e)) from None
        if self.defense_mode not in ("none", "tta"):
            raise ConfigError("defense_mode", f"unknown value {self.defense_mode!r}")
        try:
            self.defense.validate(self.model.layers)
        except ValueError as e:
            raise ConfigError("defense", str(e)) from None
        if self.eval.num_samples < 1:
            raise ConfigError("eval.num_samples", "must be >= 1")
        if self.sweep is not None:
            axis = self.sweep.get("axis")
            if axis not in SWEEP_AXES:
                raise ConfigError("sweep.axis",
                                  f"unknown axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
        return self


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    cfg = ExperimentConfig()
    if "seed" in raw:
        cfg.seed = int(raw["seed"])
    if "dataset" in raw:
        cfg.dataset.update(raw["dataset"])
    if "backbone" in raw:
        known = {"epochs", "batch_size", "lr", "warmup_steps", "label_noise",
                 "target_accuracy", "stop_accuracy"}
        bad = set(raw["backbone"]) - known
        if bad:
            raise ConfigError(f"backbone.{sorted(bad)[0]}", "unknown field")
        cfg.backbone = dict(raw["backbone"])
    if "model" in raw:
        known = {f for f in ModelConfig.__dataclass_fields__}
        bad = set(raw["model"]) - known
        if bad:
            raise ConfigError(f"model.{sorted(bad)[0]}", "unknown field")
        cfg.model = ModelConfig(**{**asdict_model(cfg.model), **raw["model"]})
    if "attack" in raw:
        known = {f for f in AttackSpec.__dataclass_fields__}
        bad = set(raw["attack"]) - known
        if bad:
            raise ConfigError(f"attack.{sorted(bad)[0]}", "unknown field")
        merged = {**cfg.attack.__dict__, **raw["attack"]}
        merged["epsilon"] = _epsilon_value(merged["epsilon"])
        cfg.attack = AttackSpec(**merged)
    if "defense" in raw:
        known = {f for f in DefenseConfig.__dataclass_fields__}
        bad = set(raw["defense"]) - known
        if bad:
            raise ConfigError(f"defense.{sorted(bad)[0]}", "unknown field")
        merged = {**cfg.defense.__dict__, **raw["defense"]}
        if isinstance(merged.get("reset_interval"), str):
            if merged["reset_interval"] not in ("inf", "none", "never"):
                raise ConfigError("defense.reset_interval",
                                  f"bad value {merged['reset_interval']!r}")
            merged["reset_interval"] = None
        if isinstance(merged.get("align_layers"), list):
            merged["align_layers"] = tuple(merged["align_layers"])
        if isinstance(merged.get("betas"), list):
            merged["betas"] = tuple(merged["betas"])
        cfg.defense = DefenseConfig(**merged)
    if "defense_mode" in raw:
        cfg.defense_mode = raw["defense_mode"]
    if "pretrain" in raw:
        known = {f for f in PretrainConfig.__dataclass_fields__}
        bad = set(raw["pretrain"]) - known
        if bad:
            raise ConfigError(f"pretrain.{sorted(bad)[0]}", "unknown field")
        merged = {**cfg.pretrain.__dict__, **raw["pretrain"]}
        merged["epsilon"] = _epsilon_value(merged["epsilon"])
        cfg.pretrain = PretrainConfig(**merged)
    if "eval" in raw:
        known = {f for f in EvalSpec.__dataclass_fields__}
        bad = set(raw["eval"]) - known
        if bad:
            raise ConfigError(f"eval.{sorted(bad)[0]}", "unknown field")
        cfg.eval = EvalSpec(**{**cfg.eval.__dict__, **raw["eval"]})
    if "sweep" in raw:
        cfg.sweep = raw["sweep"]
    unknown = set(raw) - {"seed", "dataset", "model", "backbone", "attack", "defense",
                          "defense_mode", "pretrain", "eval", "sweep"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown top-level field")
    return cfg.validate()


def asdict_model(m: ModelConfig) -> dict:
    return {f: getattr(m, f) for f in ModelConfig.__dataclass_fields__}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {
        "seed": cfg.seed,
        "dataset": dict(cfg.dataset),
        "model": asdict_model(cfg.model),
        "backbone": dict(cfg.backbone),
        "attack": dict(cfg.attack.__dict__),
        "defense": dict(cfg.defense.__dict__),
        "defense_mode": cfg.defense_mode,
        "pretrain": dict(cfg.pretrain.__dict__),
        "eval": dict(cfg.eval.__dict__),
    }
    out["defense"]["align_layers"] = list(cfg.defense.align_layers)
    out["defense"]["betas"] = list(cfg.defense.betas)
    if cfg.sweep is not None:
        out["sweep"] = cfg.sweep
    return out


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError("<document>", f"invalid JSON: {e}") from None
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# artifact builders


class Workspace:
    """Paths and cached artifacts for one (config, workdir) pair."""

    def __init__(self, cfg: ExperimentConfig, workdir, log=print):
        self.cfg = cfg
        self.root = Path(workdir)
        self.log = log or (lambda *_: None)
        self._dataset = None
        self._models: dict = {}
        self._prompts: dict = {}
        self._refs: dict = {}

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def snapshot_config(self):
        path = self.path("config.json")
        path.write_text(json.dumps(config_to_dict(self.cfg), indent=2, sort_keys=True) + "\n")

    # -- dataset --

    def dataset(self):
        if self._dataset is None:
            self._dataset = generate_dataset(
                derive_seed(self.cfg.seed, "dataset"),
                train_per_class=self.cfg.dataset["train_per_class"],
                heldout_per_class=self.cfg.dataset["heldout_per_class"])
        return self._dataset

    # -- backbone + surrogate --

    def ensure_backbone(self, kind: str = "backbone") -> DualEncoder:
        if kind in self._models:
            return self._models[kind]
        path = self.path("checkpoints", f"{kind}.ckpt")
        if path.exists():
            model = DualEncoder.load(path)
        else:
            self.log(f"[{kind}] training...")
            model, metrics = train_backbone(
                self.cfg.model, self.dataset(),
                seed=derive_seed(self.cfg.seed, kind),
                log=lambda m: self.log(f"[{kind}] {m}"),
                **self.cfg.backbone)
            model.save(path)
            self.path("checkpoints", f"{kind}.metrics.json").write_text(
                json.dumps(metrics, sort_keys=True) + "\n")
            self.log(f"[{kind}] heldout accuracy {metrics['heldout_accuracy']:.4f}")
        self._models[kind] = model
        return model

    # -- prompts --

    def _prompt_key(self, design, depth, adversarial) -> str:
        d = self.cfg.defense
        role = "warm" if adversarial else "clean"
        return (f"{role}_{design}_d{depth}_v{d.prompt_len_v}_t{d.prompt_len_t}"
                f"_eps{eps_tag(self.cfg.pretrain.epsilon)}")

    def ensure_prompt(self, design: str, depth: int, adversarial: bool) -> SinglePrompt:
        key = self._prompt_key(design, depth, adversarial)
        if key in self._prompts:
            return self._prompts[key]
        path = self.path("checkpoints", f"{key}.ckpt")
        if path.exists():
            prompt = SinglePrompt.load(path)
        else:
            model = self.ensure_backbone()
            ds = self.dataset()
            pub_x, pub_y = ds.task_split(PUBLIC_CLASSES, heldout=False)
            hx, hy = ds.task_split(PUBLIC_CLASSES, heldout=True)
            pcfg = replace(self.cfg.pretrain, adversarial=adversarial)
            dcfg = replace(self.cfg.defense, prompt_depth=depth)
            self.log(f"[{key}] pretraining prompt...")
            prompt, metrics = pretrain_prompt(
                model, pub_x, pub_y, np.array(PUBLIC_CLASSES), design, dcfg, pcfg,
                seed=derive_seed(self.cfg.seed, "pretrain", design, depth, adversarial),
                eval_images=hx, eval_labels=hy,
                log=lambda m: self.log(f"[{key}] {m}"))
            prompt.save(path, meta={"metrics": metrics})
            if metrics.get("improved") is False:
                self.log(f"[{key}] WARNING: prompt did not improve over the empty prompt"
                         f" ({metrics})")
            else:
                self.log(f"[{key}] eval {metrics.get('eval_accuracy_empty')} -> "
                         f"{metrics.get('eval_accuracy_prompt')}")
        self._prompts[key] = prompt
        return prompt

    # -- reference statistics --

    def ensure_references(self, design: str, depth: int, eps: float) -> ReferenceStatistics:
        d = self.cfg.defense
        key = (f"refs_{design}_d{depth}_v{d.prompt_len_v}_t{d.prompt_len_t}"
               f"_eps{eps_tag(eps)}_{d.pooling}")
        if key in self._refs:
            return self._refs[key]
        path = self.path("stats", f"{key}.ckpt")
        if path.exists():
            refs = ReferenceStatistics.load(path)
        else:
            model = self.ensure_backbone()
            robust = self.ensure_prompt(design, depth, adversarial=True)
            clean = self.ensure_prompt(design, depth, adversarial=False)
            ds = self.dataset()
            pub_x, pub_y = ds.task_split(PUBLIC_CLASSES, heldout=False)
            order = np.random.default_rng(
                derive_seed(self.cfg.seed, "stats-order")).permutation(len(pub_x))
            keep = order[:min(self.cfg.eval.stats_samples, len(pub_x))]
            images, labels = pub_x[keep], pub_y[keep]
            self.log(f"[{key}] attacking {len(images)} public images...")
            atk = replace(self.cfg.attack, variant="pgd", epsilon=eps).to_config()
            adv = run_attack("pgd", model, None, images, labels,
                             np.array(PUBLIC_CLASSES), atk,
                             seed=derive_seed(self.cfg.seed, "stats-attack", eps_tag(eps)))
            refs = precompute_references(model, images, adv, robust, clean,
                                         1, self.cfg.model.layers, d.pooling)
            refs.save(path, extra_meta={"design": design, "epsilon": eps,
                                        "stats_samples": int(len(images))})
        self._refs[key] = refs
        return refs

    # -- attack caches --

    def eval_samples(self) -> tuple[np.ndarray, np.ndarray]:
        """Deterministically shuffled downstream held-out images."""
        ds = self.dataset()
        x, y = ds.task_split(DOWNSTREAM_CLASSES, heldout=True)
        order = np.random.default_rng(derive_seed(self.cfg.seed, "eval-order")).permutation(len(x))
        n = min(self.cfg.eval.num_samples, len(x))
        return x[order[:n]], y[order[:n]]

    def ensure_attack_cache(self, spec: AttackSpec, design: str, depth: int) -> np.ndarray:
        x, y = self.eval_samples()
        if spec.variant == "none":
            return x
        key = f"{spec.variant}_eps{eps_tag(spec.epsilon)}_n{len(x)}_s{spec.steps}"
        if spec.adaptive:
            key += f"_adaptive_{design}"
        path = self.path("attacks", f"{key}.ckpt")
        if path.exists():
            from .checkpoint import load_arrays
            return load_arrays(path)[0]["images"]
        model = self.ensure_backbone()
        surrogate = self.ensure_backbone("surrogate") if spec.variant == "di" else None
        prompts = (None, None)
        if spec.adaptive:
            warm = self.ensure_prompt(design, depth, adversarial=True)
            prompts = (warm.visual_layers(), warm.textual)
        self.log(f"[{key}] generating adversarial images...")
        adv = run_attack(spec.variant, model, surrogate, x, y,
                         np.array(DOWNSTREAM_CLASSES), spec.to_config(),
                         seed=derive_seed(self.cfg.seed, "attack", key), prompts=prompts)
        from .checkpoint import save_arrays
        save_arrays(path, {"images": adv, "labels": y.astype(np.float64)},
                    {"kind": "attack_cache", "variant": spec.variant,
                     "epsilon": spec.epsilon, "steps": spec.steps,
                     "adaptive": spec.adaptive})
        return adv


# ---------------------------------------------------------------------------
# evaluation cells


def bootstrap_ci(correct: np.ndarray, resamples: int, seed: int) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    n = len(correct)
    means = rng.choice(correct, size=(resamples, n), replace=True).mean(axis=1)
    return float(np.percentile(means, 2.5)), float(np.percentile(means, 97.5))


def evaluate_cell(ws: Workspace, cell_cfg: ExperimentConfig, cell_name: str,
                  out_dir: Path | None = None) -> dict:
    """Run one configuration over the eval stream; write CSV + summary JSON."""
    cfg = cell_cfg.validate()
    d = cfg.defense
    depth = max(1, d.prompt_depth)
    model = ws.ensure_backbone()
    x_clean, y = ws.eval_samples()
    x_eval = ws.ensure_attack_cache(cfg.attack, d.design, depth)

    engine_kwargs = dict(references=None, seed=derive_seed(cfg.seed, "engine", cell_name))
    if cfg.defense_mode == "none" or d.prompt_depth == 0:
        bank, routers = None, None
    else:
        warm = ws.ensure_prompt(d.design, depth, adversarial=True)
        bank, routers = build_bank(warm, d.num_experts, cfg.model.dim,
                                   seed=derive_seed(cfg.seed, "bank", cell_name),
                                   noise_sigma=d.expert_noise)
        if d.steps > 0 and d.loss_mode in ("both", "align"):
            engine_kwargs["references"] = ws.ensure_references(
                d.design, depth, cfg.attack.epsilon if cfg.attack.variant != "none"
                else cfg.pretrain.epsilon)
    engine = DefenseEngine(model, np.array(DOWNSTREAM_CLASSES), d, bank, routers,
                           **engine_kwargs)

    rows = []
    for i in range(len(x_eval)):
        r = engine.process_sample(x_eval[i], i, true_label=y[i])
        rows.append(r)

    correct = np.array([1.0 if r.correct else 0.0 for r in rows])
    lo, hi = bootstrap_ci(correct, cfg.eval.bootstrap_resamples,
                          derive_seed(cfg.seed, "bootstrap", cell_name))
    summary = {
        "cell": cell_name,
        "n": len(rows),
        "accuracy": float(correct.mean()),
        "ci_lo": lo,
        "ci_hi": hi,
        "resamples": cfg.eval.bootstrap_resamples,
        "aborted": int(sum(r.aborted for r in rows)),
        "attack": cfg.attack.variant,
        "epsilon": cfg.attack.epsilon,
        "defense_mode": cfg.defense_mode,
        "steps": d.steps,
    }

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "samples.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "attack", "epsilon", "loss_pre", "loss_post",
                        "pi_bar", "predicted", "true", "correct", "wall_ms"])
            for r in rows:
                pi = "|".join(":".join(f"{v:.6g}" for v in blk) for blk in r.pi_bar)
                w.writerow([r.sample_index, cfg.attack.variant, f"{cfg.attack.epsilon:.10g}",
                            f"{r.loss_pre:.12g}", f"{r.loss_post:.12g}", pi,
                            r.predicted, r.true_label, int(bool(r.correct)),
                            f"{r.wall_ms:.3f}"])
        (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
        cell_snapshot = config_to_dict(cell_cfg)
        (out_dir / "config.json").write_text(json.dumps(cell_snapshot, indent=2, sort_keys=True) + "\n")
    return summary


# ---------------------------------------------------------------------------
# sweeps


def _set_defense(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, defense=replace(cfg.defense, **kw))


def _steps_cells(cfg):
    for s in (0, 1, 2, 4):
        yield f"steps={s}", _set_defense(cfg, steps=s)


def _epsilon_cells(cfg):
    for k in (1, 2, 4):
        yield f"eps={k}of255", replace(cfg, attack=replace(cfg.attack, epsilon=k / 255))


def _experts_cells(cfg):
    for e in (1, 3, 5, 7, 9):
        yield f"experts={e}", _set_defense(cfg, num_experts=e)


def _depth_cells(cfg):
    for depth in range(cfg.model.layers + 1):
        yield f"depth={depth}", _set_defense(cfg, prompt_depth=depth)


def _length_cells(cfg):
    for c in (0, 2, 4, 8, 32):
        yield f"len={c}", _set_defense(cfg, prompt_len_v=c, prompt_len_t=c)


def _align_cells(cfg):
    top = cfg.model.layers
    ranges = [(1, 2), (1, 3), (2, 3), (max(1, top - 1), top), (1, top)]
    seen = set()
    for lo, hi in ranges:
        if (lo, hi) in seen:
            continue
        seen.add((lo, hi))
        yield f"align={lo}-{hi}", _set_defense(cfg, align_layers=(lo, hi))


def _reset_cells(cfg):
    for n in (1, 2, 4, 8, 16, 32, None):
        label = "inf" if n is None else str(n)
        yield f"reset={label}", _set_defense(cfg, reset_interval=n)


def _design_cells(cfg):
    for design in ("v", "vlj", "vli"):
        yield f"design={design}", _set_defense(cfg, design=design)


def _loss_cells(cfg):
    yield "loss=none", _set_defense(cfg, steps=0)
    yield "loss=entropy", _set_defense(cfg, loss_mode="entropy")
    yield "loss=align", _set_defense(cfg, loss_mode="align")
    yield "loss=both", _set_defense(cfg, loss_mode="both")


SWEEP_AXES = {
    "steps": _steps_cells,
    "epsilon": _epsilon_cells,
    "experts": _experts_cells,
    "depth": _depth_cells,
    "prompt_len": _length_cells,
    "align_layers": _align_cells,
    "reset": _reset_cells,
    "design": _design_cells,
    "loss_ablation": _loss_cells,
}


def sweep_cells(cfg: ExperimentConfig, axis: str, values=None) -> list:
    cells = list(SWEEP_AXES[axis](cfg))
    if values is not None:
        wanted = {str(v) for v in values}
        cells = [(name, c) for name, c in cells if name.split("=", 1)[1] in wanted]
        if not cells:
            raise ConfigError("sweep.values", f"no cells match {sorted(wanted)} on axis {axis!r}")
    return [(name, replace(c, sweep=None)) for name, c in cells]


def run_sweep(ws: Workspace, axis: str, values=None, workers: int = 1) -> dict:
    cfg = ws.cfg
    cells = sweep_cells(cfg, axis, values)
    # build shared artifacts up front so worker threads only read
    for name, cell in cells:
        d = cell.defense
        if cell.defense_mode != "none" and d.prompt_depth >= 1 and (
                d.prompt_len_v > 0 or d.prompt_len_t > 0):
            depth = d.prompt_depth
            ws.ensure_prompt(d.design, depth, adversarial=True)
            if d.steps > 0 and d.loss_mode in ("both", "align"):
                ws.ensure_references(d.design, depth,
                                     cell.attack.epsilon if cell.attack.variant != "none"
                                     else cell.pretrain.epsilon)
        ws.ensure_attack_cache(cell.attack, d.design, max(1, d.prompt_depth))

    results = {}
    failures = {}

    def run_one(item):
        name, cell = item
        out_dir = ws.path("runs", axis, name)
        try:
            return name, evaluate_cell(ws, cell, name, out_dir), None
        except Exception as e:  # noqa: BLE001 - cell failures must not kill the sweep
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "FAILED.json").write_text(json.dumps(
                {"error": str(e), "traceback": traceback.format_exc()}) + "\n")
            return name, None, e

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for name, summary, err in pool.map(run_one, cells):
                if err is None:
                    results[name] = summary
                else:
                    failures[name] = str(err)
    else:
        for item in cells:
            name, summary, err = run_one(item)
            if err is None:
                results[name] = summary
            else:
                failures[name] = str(err)

    aggregate = {
        "axis": axis,
        "cells": [results[name] for name, _ in cells if name in results],
        "failures": failures,
    }
    ws.path("runs", axis, "aggregate.json").write_text(
        json.dumps(aggregate, sort_keys=True, indent=2) + "\n")
    return aggregate


# ---------------------------------------------------------------------------
# report and verification


def collect_runs(root) -> dict:
    """{axis: {cell: summary}} for every completed cell under runs/."""
    runs = Path(root) / "runs"
    out: dict = {}
    if not runs.exists():
        return out
    for axis_dir in sorted(runs.iterdir()):
        if not axis_dir.is_dir():
            continue
        cells = {}
        for cell_dir in sorted(axis_dir.iterdir()):
            summary = cell_dir / "summary.json"
            if summary.exists():
                cells[cell_dir.name] = json.loads(summary.read_text())
        if cells:
            out[axis_dir.name] = cells
    return out


def missing_cells(root) -> list:
    """Cells with a directory but no summary (failed or incomplete)."""
    runs = Path(root) / "runs"
    out = []
    if not runs.exists():
        return out
    for axis_dir in sorted(runs.iterdir()):
        if not axis_dir.is_dir():
            continue
        for cell_dir in sorted(axis_dir.iterdir()):
            if cell_dir.is_dir() and not (cell_dir / "summary.json").exists():
                out.append(f"{axis_dir.name}/{cell_dir.name}")
    return out


def render_report(root, write_files: bool = True) -> str:
    """Human-readable per-axis tables plus plot-ready CSVs."""
    root = Path(root)
    grouped = collect_runs(root)
    lines = []
    for axis, cells in grouped.items():
        lines.append(f"== sweep: {axis} ==")
        lines.append(f"{'cell':<18} {'n':>5} {'accuracy':>9} {'95% CI':>19}")
        rows = []
        for name, s in cells.items():
            lines.append(f"{name:<18} {s['n']:>5} {s['accuracy']:>9.4f} "
                         f"[{s['ci_lo']:.4f}, {s['ci_hi']:.4f}]")
            rows.append((name, s["n"], s["accuracy"], s["ci_lo"], s["ci_hi"]))
        lines.append("")
        if write_files:
            path = root / "report" / f"{axis}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["cell", "n", "accuracy", "ci_lo", "ci_hi"])
                w.writerows(rows)
    gaps = missing_cells(root)
    if gaps:
        lines.append("missing cells:")
        lines.extend(f"  {g}" for g in gaps)
    if not grouped and not gaps:
        lines.append("(no completed runs)")
    return "\n".join(lines)


def verify_results(root, seed: int) -> list:
    """Re-aggregate every cell CSV and compare against its summary JSON.

    Returns a list of discrepancy strings; empty means verified.
    """
    problems = []
    runs = Path(root) / "runs"
    if not runs.exists():
        return ["no runs directory"]
    for axis_dir in sorted(runs.iterdir()):
        if not axis_dir.is_dir():
            continue
        for cell_dir in sorted(axis_dir.iterdir()):
            summary_path = cell_dir / "summary.json"
            csv_path = cell_dir / "samples.csv"
            if not summary_path.exists():
                problems.append(f"{axis_dir.name}/{cell_dir.name}: missing summary")
                continue
            if not csv_path.exists():
                problems.append(f"{axis_dir.name}/{cell_dir.name}: missing samples.csv")
                continue
            summary = json.loads(summary_path.read_text())
            with open(csv_path) as fh:
                rows = list(csv.DictReader(fh))
            correct = np.array([float(r["correct"]) for r in rows])
            acc = float(correct.mean())
            lo, hi = bootstrap_ci(correct, summary.get("resamples", 1000),
                                  derive_seed(seed, "bootstrap", summary["cell"]))
            for key, got in (("accuracy", acc), ("ci_lo", lo), ("ci_hi", hi)):
                if not math.isclose(summary[key], got, abs_tol=1e-9):
                    problems.append(
                        f"{axis_dir.name}/{cell_dir.name}: {key} {summary[key]} != {got}")
            if summary["n"] != len(rows):
                problems.append(f"{axis_dir.name}/{cell_dir.name}: n mismatch")
    return problems
