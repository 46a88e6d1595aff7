"""Frozen miniature dual-encoder classifier.

A 4-block vision transformer over 4x4 patches of a 16x16 grayscale image
and a 2-block text transformer over learned template/class tokens, tied
by a contrastive head. Learnable prompt tokens can be appended to either
branch; the vision branch additionally supports per-layer prompt
injection driven by a caller-supplied provider, and records each block's
token embeddings for downstream statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .checkpoint import load_arrays, save_arrays, sha256_arrays
from .optim import AdamW

PATCH = 4


@dataclass
class ModelConfig:
    image_size: int = 16
    layers: int = 4
    text_layers: int = 2
    dim: int = 32
    heads: int = 4
    mlp_ratio: int = 4
    n_classes: int = 16
    n_template: int = 4
    temperature: float = 10.0
    input_mean: float = 0.45   # fixed pixel standardization, part of the model
    input_std: float = 0.15

    @property
    def n_patches(self) -> int:
        return (self.image_size // PATCH) ** 2

    @property
    def n_image_tokens(self) -> int:
        return self.n_patches + 1  # CLS + patches

    @property
    def n_text_tokens(self) -> int:
        return self.n_template + 1  # templates + class token


def _block_params(rng, d, mlp, prefix, params):
    params[f"{prefix}.ln1_g"] = np.ones(d)
    params[f"{prefix}.ln1_b"] = np.zeros(d)
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{name}"] = rng.normal(0.0, 0.05, size=(d, d))
    for name in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.{name}"] = np.zeros(d)
    params[f"{prefix}.ln2_g"] = np.ones(d)
    params[f"{prefix}.ln2_b"] = np.zeros(d)
    params[f"{prefix}.w1"] = rng.normal(0.0, 0.05, size=(d, mlp))
    params[f"{prefix}.b1"] = np.zeros(mlp)
    params[f"{prefix}.w2"] = rng.normal(0.0, 0.05, size=(mlp, d))
    params[f"{prefix}.b2"] = np.zeros(d)


def init_params(cfg: ModelConfig, seed: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x0DE1,)))
    d, mlp = cfg.dim, cfg.dim * cfg.mlp_ratio
    p: dict[str, np.ndarray] = {}
    p["img.patch_w"] = rng.normal(0.0, 0.05, size=(PATCH * PATCH, d))
    p["img.patch_b"] = np.zeros(d)
    p["img.cls"] = rng.normal(0.0, 0.02, size=(1, d))
    p["img.pos"] = rng.normal(0.0, 0.02, size=(cfg.n_image_tokens, d))
    for i in range(cfg.layers):
        _block_params(rng, d, mlp, f"img.blk{i}", p)
    p["img.lnf_g"] = np.ones(d)
    p["img.lnf_b"] = np.zeros(d)
    p["img.proj"] = rng.normal(0.0, 0.05, size=(d, d))
    p["txt.tok"] = rng.normal(0.0, 0.02, size=(cfg.n_classes + cfg.n_template, d))
    p["txt.pos"] = rng.normal(0.0, 0.02, size=(cfg.n_text_tokens, d))
    for i in range(cfg.text_layers):
        _block_params(rng, d, mlp, f"txt.blk{i}", p)
    p["txt.lnf_g"] = np.ones(d)
    p["txt.lnf_b"] = np.zeros(d)
    p["txt.proj"] = rng.normal(0.0, 0.05, size=(d, d))
    return p


@dataclass
class HookRecord:
    """Per-layer token embeddings from one image-branch forward pass.

    Each entry covers the full token sequence, prompt positions included;
    ``n_base`` marks how many leading tokens are backbone tokens so that
    downstream pooling can exclude prompts.
    """

    layers: list = field(default_factory=list)
    n_base: int = 0


class DualEncoder:
    def __init__(self, cfg: ModelConfig, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        raw = params if params is not None else init_params(cfg, seed)
        self.params = {k: Tensor(v) for k, v in raw.items()}

    # -- parameter management -------------------------------------------------

    def param_tensors(self):
        return list(self.params.values())

    def set_trainable(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag

    def freeze(self):
        """Make all backbone parameters immutable."""
        for t in self.params.values():
            t.requires_grad = False
            t.data.flags.writeable = False

    def params_digest(self) -> str:
        return sha256_arrays({k: t.data for k, t in self.params.items()})

    def save(self, path):
        meta = {
            "kind": "dual_encoder",
            "seed": self.seed,
            "config": {f: getattr(self.cfg, f) for f in ModelConfig.__dataclass_fields__},
        }
        save_arrays(path, {k: t.data for k, t in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "DualEncoder":
        arrays, meta = load_arrays(path)
        cfg = ModelConfig(**meta["config"])
        model = cls(cfg, params=arrays, seed=meta.get("seed", 0))
        model.freeze()
        return model

    # -- forward pieces --------------------------------------------------------

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        d, h = self.cfg.dim, self.cfg.heads
        dh = d // h
        n, t = x.shape[0], x.shape[1]

        y = ad.layer_norm(x, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
        q = ad.add(ad.matmul(y, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
        k = ad.add(ad.matmul(y, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
        v = ad.add(ad.matmul(y, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
        q = ad.transpose(ad.reshape(q, (n, t, h, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (n, t, h, dh)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (n, t, h, dh)), (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = ad.matmul(ad.softmax(scores, axis=-1), v)
        attn = ad.reshape(ad.transpose(attn, (0, 2, 1, 3)), (n, t, d))
        x = ad.add(x, ad.add(ad.matmul(attn, p[f"{prefix}.wo"]), p[f"{prefix}.bo"]))

        y = ad.layer_norm(x, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])
        y = ad.gelu(ad.add(ad.matmul(y, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        y = ad.add(ad.matmul(y, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])
        return ad.add(x, y)

    def patchify(self, images: Tensor) -> Tensor:
        """(B, 16, 16) pixels -> (B, n_patches, 16) patch rows."""
        s = self.cfg.image_size
        g = s // PATCH
        b = images.shape[0]
        x = ad.reshape(images, (b, g, PATCH, g, PATCH))
        x = ad.transpose(x, (0, 1, 3, 2, 4))
        return ad.reshape(x, (b, g * g, PATCH * PATCH))

    def embed_image_tokens(self, images: Tensor) -> Tensor:
        """Pixels to backbone token sequence {CLS, patch tokens} + positions."""
        if images.ndim != 3 or images.shape[1:] != (self.cfg.image_size, self.cfg.image_size):
            raise ValueError(
                f"expected images of shape (B, {self.cfg.image_size}, {self.cfg.image_size}),"
                f" got {images.shape}"
            )
        p = self.params
        b = images.shape[0]
        pixels = ad.scale(ad.add(images, -self.cfg.input_mean), 1.0 / self.cfg.input_std)
        tok = ad.add(ad.matmul(self.patchify(pixels), p["img.patch_w"]), p["img.patch_b"])
        cls = ad.broadcast_to(ad.reshape(p["img.cls"], (1, 1, self.cfg.dim)),
                              (b, 1, self.cfg.dim))
        seq = ad.concat([cls, tok], axis=1)
        return ad.add(seq, p["img.pos"])

    @staticmethod
    def _coerce_prompt(prompt, batch, dim):
        if prompt is None:
            return None
        if prompt.shape[-1] != dim:
            raise ValueError(
                f"prompt embedding dim {prompt.shape[-1]} does not match model dim {dim}"
            )
        if prompt.ndim == 2:
            c = prompt.shape[0]
            return ad.broadcast_to(ad.reshape(prompt, (1, c, dim)), (batch, c, dim))
        if prompt.ndim == 3:
            if prompt.shape[0] != batch:
                raise ValueError(
                    f"per-sample prompt batch {prompt.shape[0]} does not match input batch {batch}"
                )
            return prompt
        raise ValueError(f"prompt must be 2-d or 3-d, got shape {prompt.shape}")

    def encode_image(self, images: Tensor, visual_prompt=None, prompt_provider=None,
                     want_hooks: bool = False):
        """Image embeddings, optionally with per-layer hooks.

        ``visual_prompt`` ((C, D) or (B, C, D)) appends prompt tokens at the
        input layer. ``prompt_provider(layer_index, backbone_tokens)`` is
        consulted instead when given: it may return a (B, C, D) prompt for
        any layer (inserted at layer 0, re-injected at deeper layers) or
        None. Returns (embeddings, HookRecord or None).
        """
        cfg = self.cfg
        x = self.embed_image_tokens(images)
        b = x.shape[0]
        n_base = cfg.n_image_tokens
        hooks = HookRecord(n_base=n_base) if want_hooks else None

        for layer in range(cfg.layers):
            if prompt_provider is not None:
                prompt = prompt_provider(layer, x[:, :n_base] if layer > 0 else x)
            else:
                prompt = visual_prompt if layer == 0 else None
            prompt = self._coerce_prompt(prompt, b, cfg.dim)
            if prompt is not None:
                base = x if (layer == 0 and x.shape[1] == n_base) else x[:, :n_base]
                x = ad.concat([base, prompt], axis=1)
            x = self._block(x, f"img.blk{layer}")
            if hooks is not None:
                hooks.layers.append(x)

        x = ad.layer_norm(x, self.params["img.lnf_g"], self.params["img.lnf_b"])
        cls = x[:, 0]
        emb = ad.l2_normalize(ad.matmul(cls, self.params["img.proj"]), axis=-1)
        return emb, hooks

    def encode_text(self, class_ids, textual_prompt=None) -> Tensor:
        """Class embeddings under an optional textual prompt.

        ``class_ids`` indexes the class vocabulary. A (C, D) prompt is
        shared; a (B, C, D) prompt yields (B, K, D) embeddings, one class
        bank per batch row.
        """
        cfg = self.cfg
        p = self.params
        class_ids = np.asarray(class_ids, dtype=np.int64)
        if class_ids.ndim != 1:
            raise ValueError(f"class_ids must be 1-d, got shape {class_ids.shape}")
        if np.any(class_ids < 0) or np.any(class_ids >= cfg.n_classes):
            bad = class_ids[(class_ids < 0) | (class_ids >= cfg.n_classes)][0]
            raise ValueError(f"class id {bad} out of range [0, {cfg.n_classes})")
        k = class_ids.shape[0]

        tmpl = p["txt.tok"][np.arange(cfg.n_classes, cfg.n_classes + cfg.n_template)]
        cls_tok = p["txt.tok"][class_ids]
        base = ad.concat([ad.broadcast_to(ad.reshape(tmpl, (1, cfg.n_template, cfg.dim)),
                                          (k, cfg.n_template, cfg.dim)),
                          ad.reshape(cls_tok, (k, 1, cfg.dim))], axis=1)
        base = ad.add(base, p["txt.pos"])
        readout = cfg.n_text_tokens - 1

        if textual_prompt is not None and textual_prompt.ndim == 3:
            if textual_prompt.shape[-1] != cfg.dim:
                raise ValueError(
                    f"prompt embedding dim {textual_prompt.shape[-1]} "
                    f"does not match model dim {cfg.dim}"
                )
            bsz = textual_prompt.shape[0]
            c = textual_prompt.shape[1]
            seq = ad.broadcast_to(ad.reshape(base, (1, k, cfg.n_text_tokens, cfg.dim)),
                                  (bsz, k, cfg.n_text_tokens, cfg.dim))
            prm = ad.broadcast_to(ad.reshape(textual_prompt, (bsz, 1, c, cfg.dim)),
                                  (bsz, k, c, cfg.dim))
            x = ad.reshape(ad.concat([seq, prm], axis=2),
                           (bsz * k, cfg.n_text_tokens + c, cfg.dim))
        else:
            prm = self._coerce_prompt(textual_prompt, k, cfg.dim)
            x = base if prm is None else ad.concat([base, prm], axis=1)
            bsz = None

        for layer in range(cfg.text_layers):
            x = self._block(x, f"txt.blk{layer}")
        x = ad.layer_norm(x, p["txt.lnf_g"], p["txt.lnf_b"])
        emb = ad.l2_normalize(ad.matmul(x[:, readout], p["txt.proj"]), axis=-1)
        if bsz is not None:
            emb = ad.reshape(emb, (bsz, k, cfg.dim))
        return emb

    def classify(self, image_emb: Tensor, text_emb: Tensor, temperature: float | None = None) -> Tensor:
        """Softmax over temperature-scaled cosine logits.

        ``text_emb`` of shape (K, D) is shared across the batch; (B, K, D)
        matches per-sample class banks.
        """
        tau = self.cfg.temperature if temperature is None else float(temperature)
        if text_emb.ndim == 2:
            logits = ad.matmul(image_emb, ad.transpose(text_emb, (1, 0)))
        elif text_emb.ndim == 3:
            b, k, d = text_emb.shape
            img = ad.reshape(image_emb, (b, d, 1))
            logits = ad.reshape(ad.matmul(text_emb, img), (b, k))
        else:
            raise ValueError(f"text embeddings must be 2-d or 3-d, got {text_emb.shape}")
        return ad.softmax(ad.scale(logits, tau), axis=-1)

    def logits(self, image_emb: Tensor, text_emb: Tensor) -> Tensor:
        tau = self.cfg.temperature
        if text_emb.ndim == 3:
            b, k, d = text_emb.shape
            img = ad.reshape(image_emb, (b, d, 1))
            return ad.scale(ad.reshape(ad.matmul(text_emb, img), (b, k)), tau)
        return ad.scale(ad.matmul(image_emb, ad.transpose(text_emb, (1, 0))), tau)


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    b = probs.shape[0]
    picked = probs[(np.arange(b), np.asarray(labels, dtype=np.int64))]
    return ad.scale(ad.mean(ad.log(picked)), -1.0)


def zero_shot_accuracy(model: DualEncoder, images: np.ndarray, labels: np.ndarray,
                       class_ids, batch: int = 256,
                       visual_prompt=None, textual_prompt=None) -> float:
    correct = 0
    with no_grad():
        text_emb = model.encode_text(np.asarray(class_ids), textual_prompt)
        for i in range(0, len(images), batch):
            chunk = Tensor(images[i:i + batch])
            emb, _ = model.encode_image(chunk, visual_prompt=visual_prompt)
            probs = model.classify(emb, text_emb)
            correct += int((probs.data.argmax(axis=1) == labels[i:i + batch]).sum())
    return correct / len(images)


def train_backbone(cfg: ModelConfig, dataset, seed: int, epochs: int = 30,
                   batch_size: int = 128, lr: float = 3e-3, warmup_steps: int = 60,
                   label_noise: float = 0.05, target_accuracy: float = 0.90,
                   stop_accuracy: float = 0.92, log=None) -> tuple[DualEncoder, dict]:
    """Contrastively pretrain the backbone on all classes, then freeze it.

    Uses a linear learning-rate warmup (cold attention blocks diverge at
    the full rate) and stops early once held-out accuracy is comfortable.
    A small fraction of training labels is resampled uniformly: the
    resulting boundary roughness keeps the frozen model attackable at
    small pixel budgets without hurting held-out accuracy.
    Raises RuntimeError with the final held-out accuracy if the target is
    not reached; a silently weak backbone would invalidate everything
    downstream.
    """
    model = DualEncoder(cfg, seed=seed)
    model.set_trainable(True)
    opt = AdamW(model.param_tensors(), lr=lr, weight_decay=1e-4)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x7A11,)))
    all_classes = np.arange(cfg.n_classes)

    images, labels = dataset.train_images, dataset.train_labels
    if label_noise > 0:
        labels = labels.copy()
        flip = rng.uniform(size=len(labels)) < label_noise
        labels[flip] = rng.integers(0, cfg.n_classes, size=int(flip.sum()))
    n = len(images)
    step = 0
    best_accuracy = -1.0
    best_params = None
    best_epoch = 0
    for epoch in range(epochs):
        decay = 0.3 ** sum(epoch >= k for k in (int(epochs * 2 / 3), int(epochs * 6 / 7)))
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, batch_size):
            step += 1
            opt.lr = lr * min(1.0, step / warmup_steps) * decay
            idx = order[i:i + batch_size]
            text_emb = model.encode_text(all_classes)
            emb, _ = model.encode_image(Tensor(images[idx]))
            loss = cross_entropy(model.classify(emb, text_emb), labels[idx])
            grads = ad.backward(loss)
            opt.step(grads)
            losses.append(loss.item())
        accuracy = zero_shot_accuracy(
            model, dataset.heldout_images, dataset.heldout_labels, all_classes)
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best_params = [t.data.copy() for t in model.param_tensors()]
            best_epoch = epoch + 1
        if log:
            log(f"epoch {epoch + 1}/{epochs} loss {np.mean(losses):.4f} heldout {accuracy:.4f}")
        if best_accuracy >= stop_accuracy:
            break

    for t, saved in zip(model.param_tensors(), best_params):
        t.data[...] = saved
    model.freeze()
    metrics = {"heldout_accuracy": best_accuracy, "epochs": best_epoch}
    if best_accuracy < target_accuracy:
        raise RuntimeError(
            f"backbone training reached held-out accuracy {best_accuracy:.4f} "
            f"< required {target_accuracy:.2f}; adjust seed or architecture"
        )
    return model, metrics
