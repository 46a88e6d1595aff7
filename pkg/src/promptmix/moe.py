"""Expert prompt bank, routing, mixing, and the mixture regularizers.

Three prompt designs are supported: visual-only ("v"), joint ("vlj",
textual experts projected into the visual token space by a learned linear
map), and independent ("vli", separate visual and textual experts). The
visual component carries one token block per prompted encoder layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DESIGNS = ("v", "vlj", "vli")


@dataclass
class JointProjection:
    """Row-wise linear map from textual prompt tokens to visual token space."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, dim: int, seed: int) -> "JointProjection":
        rng = np.random.default_rng(seed)
        return cls(Tensor(rng.normal(0.0, 0.05, size=(dim, dim))), Tensor(np.zeros(dim)))

    def apply(self, tokens: Tensor) -> Tensor:
        return ad.add(ad.matmul(tokens, self.weight), self.bias)

    def tensors(self):
        return [self.weight, self.bias]


@dataclass
class PromptBank:
    """E expert prompts sharing one design, shape, and insertion depth."""

    design: str
    visual: Tensor | None    # (E, depth, C_v, D); None for vlj (derived) and C_v == 0
    textual: Tensor | None   # (E, C_t, D); None for the v design
    joint: JointProjection | None
    depth: int

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}; expected one of {DESIGNS}")
        if self.design == "v":
            if self.textual is not None:
                raise ValueError("visual-only design must not carry textual experts")
            if self.visual is None:
                raise ValueError("visual-only design requires visual experts")
        if self.design == "vlj":
            if self.textual is None or self.joint is None:
                raise ValueError("joint design requires textual experts and a projection")
            if self.visual is not None:
                raise ValueError("joint design derives its visual experts; do not set them")
        if self.design == "vli" and (self.visual is None or self.textual is None):
            raise ValueError("independent design requires visual and textual experts")
        if self.depth < 1:
            raise ValueError(f"insertion depth must be >= 1, got {self.depth}")
        if self.visual is not None and self.visual.shape[1] != self.depth:
            raise ValueError(
                f"visual experts carry {self.visual.shape[1]} layer blocks, expected {self.depth}"
            )

    @property
    def num_experts(self) -> int:
        src = self.visual if self.visual is not None else self.textual
        return src.shape[0]

    def trainable_tensors(self) -> list:
        out = []
        if self.design in ("v", "vli"):
            out.append(self.visual)
        if self.design in ("vlj", "vli"):
            out.append(self.textual)
        if self.design == "vlj":
            out.extend(self.joint.tensors())
        return out

    def expert_vector(self, e: int, block: int) -> Tensor:
        """Flattened parameters of expert ``e`` as seen by block ``block``.

        Block 0 owns the textual component (when present) alongside its
        visual token slice; deeper blocks see only their own visual slice.
        """
        parts = []
        if self.design == "vlj":
            visual = self.joint.apply(self.textual[e])
            parts.append(ad.reshape(visual, (-1,)))
        elif self.visual is not None and self.visual.shape[2] > 0:
            parts.append(ad.reshape(self.visual[e, block], (-1,)))
        if block == 0 and self.textual is not None and self.textual.shape[1] > 0:
            parts.append(ad.reshape(self.textual[e], (-1,)))
        if not parts:
            raise ValueError("expert has no parameters to flatten")
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


@dataclass
class Router:
    """Per-token gate; zero initialization yields the uniform mixture."""

    weight: Tensor  # (D, E)
    bias: Tensor    # (E,)

    @classmethod
    def create(cls, dim: int, num_experts: int) -> "Router":
        return cls(Tensor(np.zeros((dim, num_experts))), Tensor(np.zeros(num_experts)))

    def tensors(self):
        return [self.weight, self.bias]


def route(router: Router, tokens: Tensor) -> Tensor:
    """Mixture weights: mean over tokens of the per-token expert softmax.

    ``tokens`` is (B, T, D) or (T, D) and must exclude prompt positions.
    Returns (B, E) or (E,) on the simplex.
    """
    if tokens.ndim not in (2, 3):
        raise ValueError(f"router tokens must be 2-d or 3-d, got {tokens.shape}")
    if tokens.shape[-2] == 0:
        raise ValueError("router needs at least one token")
    logits = ad.add(ad.matmul(tokens, router.weight), router.bias)
    return ad.mean(ad.softmax(logits, axis=-1), axis=-2)


def _combine(pi: Tensor, experts: Tensor) -> Tensor:
    """Mixture-weighted sum over the leading expert axis."""
    e = experts.shape[0]
    if pi.shape[-1] != e:
        raise ValueError(f"mixture has {pi.shape[-1]} entries for {e} experts")
    rest = experts.shape[1:]
    flat = ad.reshape(experts, (e, int(np.prod(rest))))
    if pi.ndim == 1:
        return ad.reshape(ad.matmul(ad.reshape(pi, (1, e)), flat), rest)
    return ad.reshape(ad.matmul(pi, flat), (pi.shape[0],) + rest)


def mix_textual(bank: PromptBank, pi: Tensor) -> Tensor | None:
    """Textual prompt mixed under the input-block mixture."""
    if bank.textual is None or bank.textual.shape[1] == 0:
        return None
    return _combine(pi, bank.textual)


def mix_layer(bank: PromptBank, pi: Tensor, layer: int) -> tuple[Tensor | None, Tensor | None]:
    """(visual prompt for ``layer``, mixed textual) under one block's mixture.

    The joint design mixes textual experts first and projects the mixed
    prompt once, which equals mixing the projected experts by linearity.
    """
    if not 0 <= layer < bank.depth:
        raise ValueError(f"layer {layer} outside prompted depth {bank.depth}")
    if bank.design == "vlj":
        textual = mix_textual(bank, pi)
        return (None if textual is None else bank.joint.apply(textual)), textual
    textual = mix_textual(bank, pi) if layer == 0 else None
    if bank.visual is None or bank.visual.shape[2] == 0:
        return None, textual
    return _combine(pi, bank.visual[:, layer]), textual


def mix(bank: PromptBank, pis: list) -> tuple[list, Tensor | None]:
    """Convex combination of experts under per-block mixtures.

    ``pis`` holds one mixture per prompted layer, each (E,) or (B, E).
    Returns (visual prompt per layer, textual prompt mixed by the input
    block's weights).
    """
    if len(pis) != bank.depth:
        raise ValueError(f"expected {bank.depth} mixtures (one per prompted layer), got {len(pis)}")
    visual_layers = [mix_layer(bank, pis[layer], layer)[0] for layer in range(bank.depth)]
    return visual_layers, mix_textual(bank, pis[0])


def balance_loss(pi_bar: Tensor) -> Tensor:
    """Mean squared deviation of the averaged mixture from uniform."""
    e = pi_bar.shape[-1]
    dev = ad.sub(pi_bar, np.full(e, 1.0 / e))
    return ad.mean(ad.mul(dev, dev))


def diversity_loss(expert_vectors: list) -> Tensor:
    """Mean hinged pairwise cosine similarity across experts.

    Only positively correlated pairs contribute; a single expert gives 0.
    """
    e = len(expert_vectors)
    if e < 2:
        return Tensor(0.0)
    total = None
    for i in range(e):
        for j in range(i + 1, e):
            c = ad.hinge(ad.reshape(
                ad.cosine_similarity(expert_vectors[i], expert_vectors[j]), (1,)))
            total = c if total is None else ad.add(total, c)
    return ad.reshape(ad.scale(total, 2.0 / (e * (e - 1))), ())


def warmup(t: int, t_warm: int) -> float:
    """Linear ramp of the regularizer weight over the first t_warm steps."""
    if t < 0:
        raise ValueError(f"step counter must be >= 0, got {t}")
    if t_warm < 1:
        raise ValueError(f"warmup length must be >= 1, got {t_warm}")
    return min(1.0, t / t_warm)


def moe_regularizer(blocks: list, lam_bal: float, lam_div: float, gamma: float) -> Tensor:
    """gamma * sum over blocks of (lam_bal * balance + lam_div * diversity).

    ``blocks`` holds (pi_bar, expert_vectors) pairs, one per prompted layer.
    """
    if lam_bal < 0 or lam_div < 0:
        raise ValueError(f"regularizer weights must be >= 0, got {lam_bal}, {lam_div}")
    if not blocks:
        raise ValueError("regularizer needs at least one block")
    if gamma == 0.0:
        return Tensor(0.0)
    total = None
    for pi_bar, vectors in blocks:
        term = ad.add(ad.scale(balance_loss(pi_bar), lam_bal),
                      ad.scale(diversity_loss(vectors), lam_div))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, gamma)
