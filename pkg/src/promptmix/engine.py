"""Per-sample test-time defense: view selection, losses, and prompt updates.

For each test image the engine generates stochastic views, keeps the
low-entropy subset, and takes optimizer steps on the prompt bank, the
routers, and (for the joint design) the projection, minimizing prediction
entropy over the kept views plus L1 alignment of per-layer token
statistics to precomputed robust/clean references plus the mixture
regularizers. The backbone stays frozen throughout; state returns to the
warm-start snapshot on the configured reset schedule.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import moe
from .autodiff import Tensor, no_grad
from .checkpoint import load_arrays, save_arrays
from .model import DualEncoder, cross_entropy
from .optim import AdamW
from .util import derive_seed
from .views import ViewSet, augment, prediction_entropy, select_low_entropy

LOSS_MODES = ("both", "entropy", "align")
POOLINGS = ("token_mean", "cls")


@dataclass
class DefenseConfig:
    design: str = "vli"
    num_experts: int = 5
    prompt_len_v: int = 4
    prompt_len_t: int = 4
    prompt_depth: int = 1
    num_views: int = 255          # augmented views per sample, plus the original
    tau: float = 0.10             # fraction of views kept for adaptation
    alpha: float = 0.5            # robust-vs-clean alignment mix
    steps: int = 1                # optimizer steps per sample
    lr: float = 5e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    reset_interval: int | None = 1  # None = never reset
    lambda_bal: float = 0.1
    lambda_div: float = 0.01
    t_warm: int = 4
    align_layers: tuple = (1, 2)  # 1-indexed inclusive layer range
    pooling: str = "token_mean"
    loss_mode: str = "both"
    expert_noise: float = 0.02    # warm-start expert perturbation scale

    def validate(self, model_layers: int | None = None):
        if self.design not in moe.DESIGNS:
            raise ValueError(f"design: unknown value {self.design!r}")
        if self.num_experts < 1:
            raise ValueError(f"num_experts: must be >= 1, got {self.num_experts}")
        if self.prompt_len_v < 0 or self.prompt_len_t < 0:
            raise ValueError("prompt_len_v/prompt_len_t: must be >= 0")
        if self.prompt_depth < 0:
            raise ValueError(f"prompt_depth: must be >= 0, got {self.prompt_depth}")
        if self.num_views < 1:
            raise ValueError(f"num_views: must be >= 1, got {self.num_views}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau: must be in (0, 1], got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha: must be in [0, 1], got {self.alpha}")
        if self.steps < 0:
            raise ValueError(f"steps: must be >= 0, got {self.steps}")
        if self.lr < 0:
            raise ValueError(f"lr: must be >= 0, got {self.lr}")
        if self.reset_interval is not None and self.reset_interval < 1:
            raise ValueError(f"reset_interval: must be >= 1 or None, got {self.reset_interval}")
        if self.lambda_bal < 0 or self.lambda_div < 0:
            raise ValueError("lambda_bal/lambda_div: must be >= 0")
        if self.t_warm < 1:
            raise ValueError(f"t_warm: must be >= 1, got {self.t_warm}")
        lo, hi = self.align_layers
        if lo < 1 or hi < lo:
            raise ValueError(f"align_layers: bad range ({lo}, {hi})")
        if model_layers is not None and hi > model_layers:
            raise ValueError(f"align_layers: upper bound {hi} exceeds model layers {model_layers}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling: unknown value {self.pooling!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode: unknown value {self.loss_mode!r}")
        if self.expert_noise < 0:
            raise ValueError(f"expert_noise: must be >= 0, got {self.expert_noise}")
        return self


# ---------------------------------------------------------------------------
# losses and statistics


def entropy_loss(probs: Tensor) -> Tensor:
    """Entropy of the view-averaged prediction (not the averaged entropy)."""
    if probs.ndim != 2:
        raise ValueError(f"expected (views, classes) probabilities, got {probs.shape}")
    p_bar = ad.mean(probs, axis=0)
    return ad.scale(ad.sum_(ad.mul(p_bar, ad.log(p_bar))), -1.0)


@dataclass
class LayerStatistics:
    """Per-layer mean/variance of pooled token embeddings."""

    layer_lo: int
    layer_hi: int
    pooling: str
    mu: np.ndarray    # (n_layers, D)
    var: np.ndarray   # (n_layers, D)

    @property
    def n_layers(self) -> int:
        return self.layer_hi - self.layer_lo + 1

    def restrict(self, layer_lo: int, layer_hi: int) -> "LayerStatistics":
        if layer_lo < self.layer_lo or layer_hi > self.layer_hi:
            raise ValueError(
                f"requested layers ({layer_lo}, {layer_hi}) outside stored "
                f"range ({self.layer_lo}, {self.layer_hi})"
            )
        a = layer_lo - self.layer_lo
        b = layer_hi - self.layer_lo + 1
        return LayerStatistics(layer_lo, layer_hi, self.pooling,
                               self.mu[a:b].copy(), self.var[a:b].copy())


@dataclass
class ReferenceStatistics:
    adv: LayerStatistics
    clean: LayerStatistics

    def restrict(self, layer_lo: int, layer_hi: int) -> "ReferenceStatistics":
        return ReferenceStatistics(self.adv.restrict(layer_lo, layer_hi),
                                   self.clean.restrict(layer_lo, layer_hi))

    def save(self, path, extra_meta: dict | None = None):
        meta = {
            "kind": "reference_statistics",
            "layer_lo": self.adv.layer_lo,
            "layer_hi": self.adv.layer_hi,
            "pooling": self.adv.pooling,
        }
        meta.update(extra_meta or {})
        save_arrays(path, {
            "adv_mu": self.adv.mu, "adv_var": self.adv.var,
            "clean_mu": self.clean.mu, "clean_var": self.clean.var,
        }, meta)

    @classmethod
    def load(cls, path) -> "ReferenceStatistics":
        arrays, meta = load_arrays(path)
        lo, hi, pooling = meta["layer_lo"], meta["layer_hi"], meta["pooling"]
        return cls(
            LayerStatistics(lo, hi, pooling, arrays["adv_mu"], arrays["adv_var"]),
            LayerStatistics(lo, hi, pooling, arrays["clean_mu"], arrays["clean_var"]),
        )


def pool_tokens(layer: Tensor, n_base: int, pooling: str) -> Tensor:
    """One vector per view from a (B, T, D) layer; prompt tokens excluded."""
    if pooling == "cls":
        return layer[:, 0]
    return ad.mean(layer[:, :n_base], axis=1)


def current_statistics(hooks, layer_lo: int, layer_hi: int, pooling: str) -> list:
    """Differentiable per-layer (mean, variance) across the kept views.

    Variance uses the count-minus-one denominator, so at least two views
    are required.
    """
    n_views = hooks.layers[0].shape[0]
    if n_views < 2:
        raise ValueError(
            f"layer statistics need at least 2 selected views, got {n_views}; "
            f"raise tau or the number of augmented views"
        )
    if layer_lo < 1 or layer_hi > len(hooks.layers):
        raise ValueError(
            f"layer range ({layer_lo}, {layer_hi}) outside recorded layers "
            f"(1, {len(hooks.layers)})"
        )
    out = []
    for layer_idx in range(layer_lo, layer_hi + 1):
        pooled = pool_tokens(hooks.layers[layer_idx - 1], hooks.n_base, pooling)
        out.append((ad.mean(pooled, axis=0), ad.variance(pooled, axis=0)))
    return out


def alignment_loss(current: list, reference: LayerStatistics) -> Tensor:
    """Mean over layers of L1 distances between current and reference stats."""
    if len(current) != reference.n_layers:
        raise ValueError(
            f"layer-range mismatch: {len(current)} current layers vs "
            f"reference range ({reference.layer_lo}, {reference.layer_hi})"
        )
    total = None
    for i, (mu, var) in enumerate(current):
        term = ad.add(ad.l1_distance(mu, reference.mu[i]),
                      ad.l1_distance(var, reference.var[i]))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / reference.n_layers)


def combined_alignment(current: list, refs: ReferenceStatistics, alpha: float) -> Tensor:
    return ad.add(ad.scale(alignment_loss(current, refs.adv), alpha),
                  ad.scale(alignment_loss(current, refs.clean), 1.0 - alpha))


# ---------------------------------------------------------------------------
# single static prompt: pretraining and the plain forward path


@dataclass
class SinglePrompt:
    """One static prompt set; also the warm-start source for expert banks."""

    design: str
    visual: Tensor | None   # (depth, C_v, D)
    textual: Tensor | None  # (C_t, D)
    joint: moe.JointProjection | None

    def trainable_tensors(self) -> list:
        out = []
        if self.design in ("v", "vli") and self.visual is not None:
            out.append(self.visual)
        if self.design in ("vlj", "vli") and self.textual is not None:
            out.append(self.textual)
        if self.design == "vlj":
            out.extend(self.joint.tensors())
        return out

    def visual_layers(self) -> Tensor | None:
        if self.design == "vlj":
            return None if self.textual is None else self.joint.apply(self.textual)
        return None if self.visual is None else self.visual

    def save(self, path, meta: dict | None = None):
        arrays = {}
        if self.visual is not None:
            arrays["visual"] = self.visual.data
        if self.textual is not None:
            arrays["textual"] = self.textual.data
        if self.joint is not None:
            arrays["joint_w"] = self.joint.weight.data
            arrays["joint_b"] = self.joint.bias.data
        header = {"kind": "prompt", "design": self.design}
        header.update(meta or {})
        save_arrays(path, arrays, header)

    @classmethod
    def load(cls, path) -> "SinglePrompt":
        arrays, meta = load_arrays(path)
        joint = None
        if "joint_w" in arrays:
            joint = moe.JointProjection(Tensor(arrays["joint_w"]), Tensor(arrays["joint_b"]))
        return cls(
            design=meta["design"],
            visual=Tensor(arrays["visual"]) if "visual" in arrays else None,
            textual=Tensor(arrays["textual"]) if "textual" in arrays else None,
            joint=joint,
        )


def init_single_prompt(design: str, dim: int, prompt_len_v: int, prompt_len_t: int,
                       depth: int, seed: int, init_scale: float = 0.02) -> SinglePrompt:
    rng = np.random.default_rng(derive_seed(seed, "prompt-init", design))
    visual = textual = joint = None
    if design in ("v", "vli") and prompt_len_v > 0:
        visual = Tensor(rng.normal(0.0, init_scale, size=(depth, prompt_len_v, dim)))
    if design in ("vlj", "vli") and prompt_len_t > 0:
        textual = Tensor(rng.normal(0.0, init_scale, size=(prompt_len_t, dim)))
    if design == "vlj":
        joint = moe.JointProjection.create(dim, derive_seed(seed, "joint", design))
    return SinglePrompt(design, visual, textual, joint)


def single_prompt_forward(model: DualEncoder, images: Tensor, prompt: SinglePrompt | None,
                          class_ids, want_hooks: bool = False):
    """Forward pass under a static prompt, bypassing routing and mixing."""
    visual = prompt.visual_layers() if prompt is not None else None
    textual = prompt.textual if prompt is not None else None
    depth = 0 if visual is None else visual.shape[0]

    def provider(layer, _tokens):
        return visual[layer] if layer < depth else None

    emb, hooks = model.encode_image(
        images, prompt_provider=provider if visual is not None else None,
        want_hooks=want_hooks)
    text_emb = model.encode_text(np.asarray(class_ids), textual)
    probs = model.classify(emb, text_emb)
    return probs, hooks


@dataclass
class PretrainConfig:
    adversarial: bool = True
    epsilon: float = 4 / 255
    inner_steps: int = 2          # attack iterations inside the min-max loop
    inner_step_size: float = 1 / 255
    epochs: int = 10
    batch_size: int = 128
    lr: float = 2e-2
    eval_samples: int = 256       # held-out slice for the improvement check


def _inner_attack(model, images, labels, class_ids, prompt: SinglePrompt,
                  cfg: PretrainConfig, rng) -> np.ndarray:
    orig = images
    adv = np.clip(orig + rng.uniform(-cfg.epsilon, cfg.epsilon, size=orig.shape), 0.0, 1.0)
    for _ in range(cfg.inner_steps):
        x = Tensor(adv, requires_grad=True)
        probs, _ = single_prompt_forward(model, x, prompt, class_ids)
        ad.backward(cross_entropy(probs, labels))
        adv = adv + cfg.inner_step_size * np.sign(x.grad)
        adv = np.clip(np.clip(adv, orig - cfg.epsilon, orig + cfg.epsilon), 0.0, 1.0)
    return adv


def pretrain_prompt(model: DualEncoder, images: np.ndarray, labels: np.ndarray,
                    class_ids, design: str, defense_cfg: DefenseConfig,
                    cfg: PretrainConfig, seed: int,
                    eval_images: np.ndarray | None = None,
                    eval_labels: np.ndarray | None = None,
                    log=None) -> tuple[SinglePrompt, dict]:
    """Train one static prompt on a labeled split, frozen backbone.

    With ``cfg.adversarial`` the batch is re-attacked against the current
    prompt before each update (min-max); otherwise this is standard prompt
    tuning on clean images. Returns the prompt plus metrics including the
    robust/clean accuracy improvement over the empty prompt on the eval
    slice; ``metrics["improved"]`` is False when there is no improvement.
    """
    depth = max(1, defense_cfg.prompt_depth)
    prompt = init_single_prompt(design, model.cfg.dim, defense_cfg.prompt_len_v,
                                defense_cfg.prompt_len_t, depth, seed)
    trainable = prompt.trainable_tensors()
    metrics: dict = {"design": design, "adversarial": cfg.adversarial}
    if not trainable:
        metrics.update({"improved": False, "note": "prompt has no trainable parameters"})
        return prompt, metrics
    for t in trainable:
        t.requires_grad = True
    opt = AdamW(trainable, lr=cfg.lr, weight_decay=0.0)
    rng = np.random.default_rng(derive_seed(seed, "pretrain", design, cfg.adversarial))
    class_ids = np.asarray(class_ids)

    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            batch = images[idx]
            if cfg.adversarial:
                with_prompts = _inner_attack(model, batch, labels[idx], class_ids,
                                             prompt, cfg, rng)
            else:
                with_prompts = batch
            probs, _ = single_prompt_forward(model, Tensor(with_prompts), prompt, class_ids)
            loss = cross_entropy(probs, labels[idx])
            opt.step(ad.backward(loss))
            losses.append(loss.item())
        if log:
            log(f"prompt epoch {epoch + 1}/{cfg.epochs} loss {np.mean(losses):.4f}")

    for t in trainable:
        t.requires_grad = False

    if eval_images is not None:
        from .attacks import AttackConfig, pgd_task

        k = min(cfg.eval_samples, len(eval_images))
        ev_x, ev_y = eval_images[:k], eval_labels[:k]
        if cfg.adversarial:
            atk = AttackConfig(epsilon=cfg.epsilon, steps=20)
            ev_x = pgd_task(model, ev_x, ev_y, class_ids, atk,
                            seed=derive_seed(seed, "pretrain-eval", design))
        base = _prompt_accuracy(model, ev_x, ev_y, class_ids, None)
        ours = _prompt_accuracy(model, ev_x, ev_y, class_ids, prompt)
        metrics.update({
            "eval_accuracy_empty": base,
            "eval_accuracy_prompt": ours,
            "improved": ours > base,
        })
    return prompt, metrics


def _prompt_accuracy(model, images, labels, class_ids, prompt) -> float:
    correct = 0
    with no_grad():
        for i in range(0, len(images), 256):
            probs, _ = single_prompt_forward(model, Tensor(images[i:i + 256]), prompt, class_ids)
            correct += int((probs.data.argmax(axis=1) == labels[i:i + 256]).sum())
    return correct / len(images)


def build_bank(prompt: SinglePrompt, num_experts: int, dim: int, seed: int,
               noise_sigma: float = 0.02) -> tuple[moe.PromptBank, list]:
    """Warm-start bank: the trained prompt plus per-expert noise, routers at zero."""
    rng = np.random.default_rng(derive_seed(seed, "bank", num_experts))
    depth = 1 if prompt.visual is None else prompt.visual.shape[0]

    def expand(t: Tensor | None) -> Tensor | None:
        if t is None:
            return None
        base = np.broadcast_to(t.data, (num_experts,) + t.data.shape).copy()
        if t.data.size:
            base += rng.normal(0.0, noise_sigma, size=base.shape)
        return Tensor(base)

    visual = expand(prompt.visual) if prompt.design in ("v", "vli") else None
    textual = expand(prompt.textual)
    joint = None
    if prompt.design == "vlj":
        joint = moe.JointProjection(Tensor(prompt.joint.weight.data.copy()),
                                    Tensor(prompt.joint.bias.data.copy()))
    bank = moe.PromptBank(design=prompt.design, visual=visual, textual=textual,
                          joint=joint, depth=depth)
    routers = [moe.Router.create(dim, num_experts) for _ in range(depth)]
    return bank, routers


# ---------------------------------------------------------------------------
# reference statistics


def precompute_references(model: DualEncoder, clean_images: np.ndarray,
                          adv_images: np.ndarray, robust_prompt: SinglePrompt,
                          clean_prompt: SinglePrompt, layer_lo: int, layer_hi: int,
                          pooling: str, batch: int = 256) -> ReferenceStatistics:
    """Layer statistics of the public split under the trained prompts.

    Robust statistics come from attacked images under the robust prompt;
    clean statistics from clean images under the clean prompt. Variance
    uses the count-minus-one denominator across images.
    """
    if len(clean_images) == 0 or len(adv_images) == 0:
        raise ValueError("reference statistics need a non-empty public split")

    def stats(images, prompt) -> LayerStatistics:
        per_layer = [[] for _ in range(layer_lo, layer_hi + 1)]
        with no_grad():
            for i in range(0, len(images), batch):
                x = Tensor(images[i:i + batch])
                _, hooks = single_prompt_forward(
                    model, x, prompt, np.arange(model.cfg.n_classes), want_hooks=True)
                for j, layer_idx in enumerate(range(layer_lo, layer_hi + 1)):
                    pooled = pool_tokens(hooks.layers[layer_idx - 1], hooks.n_base, pooling)
                    per_layer[j].append(pooled.data)
        mus, variances = [], []
        for chunks in per_layer:
            stacked = np.concatenate(chunks, axis=0)
            mus.append(stacked.mean(axis=0))
            variances.append(stacked.var(axis=0, ddof=1))
        return LayerStatistics(layer_lo, layer_hi, pooling,
                               np.stack(mus), np.stack(variances))

    return ReferenceStatistics(adv=stats(adv_images, robust_prompt),
                               clean=stats(clean_images, clean_prompt))


# ---------------------------------------------------------------------------
# the per-sample adaptation engine


@dataclass
class SampleResult:
    sample_index: int
    predicted: int
    true_label: int | None
    loss_pre: float
    loss_post: float
    pi_bar: list
    selected_count: int
    aborted: bool
    wall_ms: float

    @property
    def correct(self) -> bool | None:
        return None if self.true_label is None else self.predicted == self.true_label


class DefenseEngine:
    """Owns one adaptation stream: bank, routers, optimizer, reset schedule."""

    def __init__(self, model: DualEncoder, class_ids, config: DefenseConfig,
                 bank: moe.PromptBank | None, routers: list | None,
                 references: ReferenceStatistics | None = None, seed: int = 0):
        config.validate(model.cfg.layers)
        self.model = model
        self.class_ids = np.asarray(class_ids)
        self.config = config
        self.bank = bank
        self.routers = routers or []
        self.references = None
        if references is not None:
            self.references = references.restrict(*config.align_layers)
            if self.references.adv.pooling != config.pooling:
                raise ValueError(
                    f"references were pooled with {self.references.adv.pooling!r}, "
                    f"config wants {config.pooling!r}"
                )
        self.seed = seed

        self.trainable: list[Tensor] = []
        if bank is not None:
            self.trainable.extend(bank.trainable_tensors())
            for r in self.routers:
                self.trainable.extend(r.tensors())
        for t in self.trainable:
            t.requires_grad = True
        self.has_prompts = bool(bank is not None and any(t.size for t in bank.trainable_tensors()))
        if (self.has_prompts and config.steps > 0 and self.references is None
                and config.loss_mode in ("both", "align")):
            raise ValueError("alignment loss requested but no reference statistics given")
        self.opt = AdamW(self.trainable, lr=config.lr, betas=config.betas,
                         weight_decay=config.weight_decay)
        self.t = 0
        self._text_cache = None
        if bank is None or bank.textual is None or bank.textual.shape[1] == 0:
            with no_grad():
                self._text_cache = self.model.encode_text(self.class_ids).data
        self._snapshot = self._capture()

    # -- state management ------------------------------------------------------

    def _capture(self) -> dict:
        return {
            "params": [t.data.copy() for t in self.trainable],
            "opt": self.opt.state_dict(),
            "t": self.t,
        }

    def snapshot_distance(self) -> float:
        """L2 distance of the current trainable state from the warm snapshot."""
        return math.sqrt(sum(
            float(((t.data - saved) ** 2).sum())
            for t, saved in zip(self.trainable, self._snapshot["params"])))

    def reset(self):
        for t, saved in zip(self.trainable, self._snapshot["params"]):
            t.data[...] = saved
        self.opt.load_state_dict(self._snapshot["opt"])
        self.t = self._snapshot["t"]

    def maybe_reset(self, sample_index: int):
        n = self.config.reset_interval
        if n is not None and sample_index % n == 0:
            self.reset()

    # -- forward paths ----------------------------------------------------------

    def forward_views(self, views: np.ndarray, want_hooks: bool = False):
        """Probabilities for a stack of views under the current mixed prompts.

        Returns (probs (B, K), per-block mixtures, hooks).
        """
        x = Tensor(np.asarray(views, dtype=np.float64))
        pis: list = []

        provider = None
        if self.has_prompts:
            depth = self.bank.depth

            def provider(layer, tokens):
                if layer >= depth:
                    return None
                pi = moe.route(self.routers[layer], tokens)
                pis.append(pi)
                visual, _ = moe.mix_layer(self.bank, pi, layer)
                return visual

        emb, hooks = self.model.encode_image(x, prompt_provider=provider,
                                             want_hooks=want_hooks)
        if self._text_cache is not None:
            text_emb = Tensor(self._text_cache)
        else:
            textual = moe.mix_textual(self.bank, pis[0])
            text_emb = self.model.encode_text(self.class_ids, textual)
        probs = self.model.classify(emb, text_emb)
        return probs, pis, hooks

    def predict(self, image: np.ndarray):
        with no_grad():
            probs, pis, _ = self.forward_views(image[None])
        pi_bar = [pi.data.reshape(-1) for pi in pis]
        return int(probs.data[0].argmax()), probs.data[0], pi_bar

    # -- adaptation --------------------------------------------------------------

    def select(self, viewset: ViewSet) -> ViewSet:
        """Score all views under current prompts and keep the low-entropy set."""
        with no_grad():
            probs, _, _ = self.forward_views(viewset.views)
        viewset.entropies = prediction_entropy(probs.data)
        viewset.selected = select_low_entropy(viewset.entropies, self.config.tau)
        viewset.tau = self.config.tau
        return viewset

    def compute_loss(self, selected_views: np.ndarray, gamma: float | None = None):
        """Total adaptation loss on the kept views at the current state."""
        cfg = self.config
        need_align = cfg.loss_mode in ("both", "align") and self.references is not None
        probs, pis, hooks = self.forward_views(selected_views, want_hooks=need_align)

        parts = {}
        total = None
        if cfg.loss_mode in ("both", "entropy"):
            ent = entropy_loss(probs)
            parts["entropy"] = ent.item()
            total = ent
        if need_align:
            current = current_statistics(hooks, cfg.align_layers[0], cfg.align_layers[1],
                                         cfg.pooling)
            align = combined_alignment(current, self.references, cfg.alpha)
            parts["align"] = align.item()
            total = align if total is None else ad.add(total, align)

        pi_bars = []
        if self.has_prompts and pis:
            gamma_val = moe.warmup(self.t, cfg.t_warm) if gamma is None else gamma
            blocks = []
            for block_idx, pi in enumerate(pis):
                pi_bar = ad.mean(pi, axis=0) if pi.ndim == 2 else pi
                pi_bars.append(pi_bar.data.copy())
                vectors = [self.bank.expert_vector(e, block_idx)
                           for e in range(self.bank.num_experts)]
                blocks.append((pi_bar, vectors))
            reg = moe.moe_regularizer(blocks, cfg.lambda_bal, cfg.lambda_div, gamma_val)
            parts["moe"] = reg.item()
            total = reg if total is None else ad.add(total, reg)
        if total is None:
            raise ValueError("no loss terms active; check loss_mode and references")
        parts["total"] = total.item()
        return total, parts, pi_bars

    def adapt_step(self, selected_views: np.ndarray):
        """One optimizer step on the adaptation loss; advances the warmup counter."""
        loss, parts, pi_bars = self.compute_loss(selected_views)
        if not np.isfinite(parts["total"]):
            return parts, pi_bars, False
        grads = ad.backward(loss)
        self.opt.step(grads)
        self.t += 1
        return parts, pi_bars, True

    def process_sample(self, image: np.ndarray, sample_index: int,
                       true_label: int | None = None) -> SampleResult:
        """Full per-sample pipeline: reset, augment, select, adapt, predict."""
        start = time.perf_counter()
        self.maybe_reset(sample_index)
        cfg = self.config

        loss_pre = float("nan")
        loss_post = float("nan")
        pi_bars: list = []
        aborted = False
        n_selected = 0

        if cfg.steps > 0 and self.has_prompts and self.trainable:
            viewset = augment(image, cfg.num_views,
                              derive_seed(self.seed, "augment", sample_index))
            self.select(viewset)
            selected = viewset.selected_views()
            n_selected = len(selected)
            gamma_pre = moe.warmup(self.t, cfg.t_warm)
            for step in range(cfg.steps):
                parts, pi_bars, ok = self.adapt_step(selected)
                if step == 0:
                    loss_pre = parts["total"]
                if not ok:
                    aborted = True
                    self.reset()
                    break
            if not aborted:
                with no_grad():
                    _, post_parts, _ = self.compute_loss(selected, gamma=gamma_pre)
                loss_post = post_parts["total"]

        predicted, _, predict_pi = self.predict(image)
        if not pi_bars:
            pi_bars = predict_pi
        wall_ms = (time.perf_counter() - start) * 1e3
        return SampleResult(
            sample_index=sample_index,
            predicted=predicted,
            true_label=None if true_label is None else int(true_label),
            loss_pre=loss_pre,
            loss_post=loss_post,
            pi_bar=[np.asarray(p).tolist() for p in pi_bars],
            selected_count=n_selected,
            aborted=aborted,
            wall_ms=wall_ms,
        )
