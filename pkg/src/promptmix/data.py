"""Procedural grayscale shape dataset.

Sixteen 16x16 shape/texture classes rendered from a seed, split into two
disjoint 8-class tasks: a "public" task used for prompt pretraining and
reference statistics, and a "downstream" task that the defense never
tunes on. Every image is foreground shape on background with intensity
jitter, geometric jitter, and additive Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IMAGE_SIZE = 16

CLASS_NAMES = [
    "disk", "ring", "square", "frame", "plus", "cross", "hstripes", "vstripes",
    "checker", "triangle", "diamond", "dotgrid", "bars", "halfsplit", "band", "target",
]

PUBLIC_CLASSES = tuple(range(8))
DOWNSTREAM_CLASSES = tuple(range(8, 16))


def _grid(cx, cy):
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    return yy - cy, xx - cx


def _shape_mask(class_id: int, rng: np.random.Generator) -> np.ndarray:
    cx = 7.5 + rng.uniform(-1.5, 1.5)
    cy = 7.5 + rng.uniform(-1.5, 1.5)
    s = rng.uniform(0.75, 1.0)
    dy, dx = _grid(cx, cy)
    r = np.hypot(dx, dy)

    name = CLASS_NAMES[class_id]
    if name == "disk":
        return r < 5.0 * s
    if name == "ring":
        return np.abs(r - 5.0 * s) < 1.4
    if name == "square":
        return (np.abs(dx) < 4.5 * s) & (np.abs(dy) < 4.5 * s)
    if name == "frame":
        m = np.maximum(np.abs(dx), np.abs(dy))
        return (m < 5.5 * s) & (m > 5.5 * s - 2.0)
    if name == "plus":
        return ((np.abs(dx) < 1.6) | (np.abs(dy) < 1.6)) & (r < 6.5 * s)
    if name == "cross":
        return ((np.abs(dx - dy) < 2.0) | (np.abs(dx + dy) < 2.0)) & (r < 6.5 * s)
    if name == "hstripes":
        phase = rng.integers(0, 4)
        yy = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE][0]
        return ((yy + phase) // 2) % 2 == 0
    if name == "vstripes":
        phase = rng.integers(0, 4)
        xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE][1]
        return ((xx + phase) // 2) % 2 == 0
    if name == "checker":
        phase = rng.integers(0, 4)
        yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
        return (((yy + phase) // 3) + ((xx + phase) // 3)) % 2 == 0
    if name == "triangle":
        top = -5.0 * s
        return (dy > top) & (dy < 5.0 * s) & (np.abs(dx) < (dy - top) * 0.62)
    if name == "diamond":
        return (np.abs(dx) + np.abs(dy)) < 6.0 * s
    if name == "dotgrid":
        best = np.full((IMAGE_SIZE, IMAGE_SIZE), np.inf)
        for oy in (-4.2, 0.0, 4.2):
            for ox in (-4.2, 0.0, 4.2):
                best = np.minimum(best, np.hypot(dx - ox * s, dy - oy * s))
        return best < 1.5
    if name == "bars":
        return (np.abs(dy - 3.2 * s) < 1.4) | (np.abs(dy + 3.2 * s) < 1.4)
    if name == "halfsplit":
        return dy < 0
    if name == "band":
        return np.abs(dx) < 3.0 * s
    if name == "target":
        return (r < 1.8) | (np.abs(r - 5.2 * s) < 1.2)
    raise ValueError(f"unknown class id {class_id}")


def render_image(class_id: int, rng: np.random.Generator) -> np.ndarray:
    """One image in [0,1], shape (16, 16).

    Contrast and noise are chosen so that a plainly trained classifier
    reaches high clean accuracy yet keeps margins small enough for
    pixel-budget attacks to succeed; high-contrast renderings make every
    model in this family trivially robust, which defeats the point.
    """
    mask = _shape_mask(class_id, rng)
    bg = rng.uniform(0.30, 0.45)
    fg = bg + rng.uniform(0.12, 0.30)
    img = np.where(mask, fg, bg)
    img = img + rng.normal(0.0, 0.08, size=img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass
class Dataset:
    train_images: np.ndarray   # (N, 16, 16)
    train_labels: np.ndarray   # (N,) int, global class ids
    heldout_images: np.ndarray
    heldout_labels: np.ndarray
    seed: int

    def task_split(self, class_ids, heldout: bool = True):
        """Images/labels restricted to one task; labels remapped to 0..K-1."""
        images = self.heldout_images if heldout else self.train_images
        labels = self.heldout_labels if heldout else self.train_labels
        class_ids = list(class_ids)
        sel = np.isin(labels, class_ids)
        remap = {c: i for i, c in enumerate(class_ids)}
        local = np.array([remap[c] for c in labels[sel]], dtype=np.int64)
        return images[sel], local


def generate_dataset(seed: int, train_per_class: int = 500, heldout_per_class: int = 100) -> Dataset:
    """Deterministic dataset; images interleave classes round-robin."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xDA7A,)))
    n_classes = len(CLASS_NAMES)

    def build(per_class):
        images = np.empty((per_class * n_classes, IMAGE_SIZE, IMAGE_SIZE))
        labels = np.empty(per_class * n_classes, dtype=np.int64)
        i = 0
        for _ in range(per_class):
            for c in range(n_classes):
                images[i] = render_image(c, rng)
                labels[i] = c
                i += 1
        return images, labels

    train_images, train_labels = build(train_per_class)
    heldout_images, heldout_labels = build(heldout_per_class)
    return Dataset(train_images, train_labels, heldout_images, heldout_labels, seed)
