"""L-inf bounded adversarial attacks against the frozen dual encoder.

All attacks perturb pixels of the bare backbone pipeline (hand-crafted
empty prompts); they never touch prompt or router parameters. A
defense-aware variant can be requested by passing the prompts the
defended model will use, which is an explicit experiment switch rather
than the default threat model. Every attack is a pure function of
(model, images, labels, config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .model import DualEncoder, cross_entropy
from .util import bilinear_matrix

VARIANTS = ("pgd", "cw", "di")


@dataclass
class AttackConfig:
    epsilon: float = 4 / 255
    steps: int = 100
    step_size: float | None = None  # defaults to epsilon / 4
    variant: str = "pgd"
    random_start: bool = True
    kappa: float = 0.0            # CW margin clamp
    di_prob: float = 0.5          # per-step input-diversity probability
    di_min_size: int = 12

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attack variant {self.variant!r}; expected one of {VARIANTS}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is None:
            self.step_size = self.epsilon / 4.0
        if self.epsilon > 0 and not (0 < self.step_size <= self.epsilon):
            raise ValueError(
                f"step_size must satisfy 0 < step_size <= epsilon, "
                f"got {self.step_size} with epsilon {self.epsilon}"
            )
        if not 0.0 <= self.di_prob <= 1.0:
            raise ValueError(f"di_prob must be in [0, 1], got {self.di_prob}")


def project(adv: np.ndarray, orig: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto the L-inf ball around ``orig`` intersected with [0, 1]."""
    return np.clip(np.clip(adv, orig - epsilon, orig + epsilon), 0.0, 1.0)


def _grad_wrt_images(model, images_np, labels, class_ids, prompts, loss_kind, cfg,
                     transform=None):
    x = Tensor(images_np, requires_grad=True)
    xin = transform(x) if transform is not None else x
    visual, textual = prompts
    emb, _ = model.encode_image(xin, visual_prompt=visual)
    text_emb = model.encode_text(class_ids, textual_prompt=textual)
    if loss_kind == "ce":
        loss = cross_entropy(model.classify(emb, text_emb), labels)
    else:  # CW margin: mean over batch of max(z_y - max_{j != y} z_j, -kappa)
        logits = model.logits(emb, text_emb)
        b, k = logits.shape
        z_y = logits[(np.arange(b), labels)]
        mask = np.zeros((b, k))
        mask[np.arange(b), labels] = -1e9
        z_other = ad.max_(ad.add(logits, mask), axis=1)
        margin = ad.sub(z_y, z_other)
        shifted = ad.add(ad.hinge(ad.add(margin, cfg.kappa)), -cfg.kappa)
        loss = ad.mean(shifted)
    ad.backward(loss)
    return x.grad


def _run(model: DualEncoder, images: np.ndarray, labels: np.ndarray, class_ids,
         cfg: AttackConfig, seed: int, loss_kind: str, prompts=(None, None),
         transform_rng=None) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    squeeze = images.ndim == 2
    if squeeze:
        images = images[None]
        labels = np.asarray([labels])
    labels = np.asarray(labels, dtype=np.int64)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    orig = images.copy()

    rng = np.random.default_rng(seed)
    if cfg.random_start and cfg.epsilon > 0:
        adv = project(orig + rng.uniform(-cfg.epsilon, cfg.epsilon, size=orig.shape), orig, cfg.epsilon)
    else:
        adv = orig.copy()

    if cfg.epsilon == 0.0:
        return adv[0] if squeeze else adv

    sign = 1.0 if loss_kind == "ce" else -1.0  # ascend CE, descend CW margin
    for _ in range(cfg.steps):
        transform = None
        if transform_rng is not None and transform_rng.uniform() < cfg.di_prob:
            transform = _diversity_transform(transform_rng, images.shape[-1], cfg.di_min_size)
        g = _grad_wrt_images(model, adv, labels, class_ids, prompts, loss_kind, cfg,
                             transform=transform)
        adv = project(adv + sign * cfg.step_size * np.sign(g), orig, cfg.epsilon)
    return adv[0] if squeeze else adv


def _diversity_transform(rng, size: int, min_size: int):
    r = int(rng.integers(min_size, size + 1))
    oy = int(rng.integers(0, size - r + 1))
    ox = int(rng.integers(0, size - r + 1))
    down_h = bilinear_matrix(r, size)
    pad_y = np.zeros((size, r))
    pad_y[oy:oy + r, :] = np.eye(r)
    pad_x = np.zeros((size, r))
    pad_x[ox:ox + r, :] = np.eye(r)
    left = pad_y @ down_h      # (size, size): resize rows then place at offset
    right = (pad_x @ down_h).T

    def transform(x: Tensor) -> Tensor:
        return ad.matmul(ad.matmul(Tensor(left), x), Tensor(right))

    return transform


def pgd(model: DualEncoder, images, labels, cfg: AttackConfig, seed: int = 0,
        prompts=(None, None)) -> np.ndarray:
    """Projected gradient ascent on the contrastive classification loss."""
    return _run(model, images, labels, np.arange(model.cfg.n_classes), cfg, seed,
                "ce", prompts=prompts)


def pgd_task(model, images, labels, class_ids, cfg: AttackConfig, seed: int = 0,
             prompts=(None, None)) -> np.ndarray:
    """PGD against a restricted class vocabulary (task-local labels)."""
    return _run(model, images, labels, class_ids, cfg, seed, "ce", prompts=prompts)


def cw_attack(model: DualEncoder, images, labels, cfg: AttackConfig, seed: int = 0,
              prompts=(None, None)) -> np.ndarray:
    """Iterative margin attack max(z_y - max_{j!=y} z_j, -kappa) under the same projection."""
    return _run(model, images, labels, np.arange(model.cfg.n_classes), cfg, seed,
                "cw", prompts=prompts)


def cw_task(model, images, labels, class_ids, cfg: AttackConfig, seed: int = 0,
            prompts=(None, None)) -> np.ndarray:
    return _run(model, images, labels, class_ids, cfg, seed, "cw", prompts=prompts)


def di_attack(surrogate: DualEncoder, images, labels, cfg: AttackConfig, seed: int = 0,
              class_ids=None, prompts=(None, None)) -> np.ndarray:
    """Transfer attack: PGD on a surrogate with random resize-and-pad diversity.

    The input-diversity transform (random downsize to [di_min_size, size]
    pixels, zero-padded back at a random offset) is redrawn every step and
    applied with probability ``di_prob``; gradients flow through it. With
    ``di_prob = 0`` this is exactly PGD on the surrogate.
    """
    if class_ids is None:
        class_ids = np.arange(surrogate.cfg.n_classes)
    transform_rng = np.random.default_rng(np.random.default_rng(seed).integers(2**63))
    return _run(surrogate, images, labels, class_ids, cfg, seed, "ce",
                prompts=prompts, transform_rng=transform_rng)


def run_attack(variant: str, model, surrogate, images, labels, class_ids,
               cfg: AttackConfig, seed: int, prompts=(None, None)) -> np.ndarray:
    if variant == "pgd":
        return pgd_task(model, images, labels, class_ids, cfg, seed, prompts=prompts)
    if variant == "cw":
        return cw_task(model, images, labels, class_ids, cfg, seed, prompts=prompts)
    if variant == "di":
        if surrogate is None:
            raise ValueError("di attack requires a surrogate model")
        return di_attack(surrogate, images, labels, cfg, seed, class_ids=class_ids,
                         prompts=prompts)
    raise ValueError(f"unknown attack variant {variant!r}")
