"""Stochastic view generation and low-entropy view selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .util import bilinear_matrix

CROP_SCALE = (0.5, 1.0)   # area fraction of the random resized crop
FLIP_PROB = 0.5


@dataclass
class ViewSet:
    """The original image plus M augmented views and their selection state."""

    views: np.ndarray                    # (M+1, H, W); views[0] is the original
    entropies: np.ndarray | None = None  # per-view prediction entropy
    selected: np.ndarray | None = None   # indices into views, low entropy first
    tau: float | None = None

    @property
    def num_views(self) -> int:
        return self.views.shape[0]

    def selected_views(self) -> np.ndarray:
        if self.selected is None:
            raise ValueError("views have not been scored/selected yet")
        return self.views[self.selected]


def random_resized_crop(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = image.shape[0]
    scale = rng.uniform(*CROP_SCALE)
    side = max(1, round(size * math.sqrt(scale)))
    y0 = int(rng.integers(0, size - side + 1))
    x0 = int(rng.integers(0, size - side + 1))
    crop = image[y0:y0 + side, x0:x0 + side]
    up = bilinear_matrix(size, side)
    return up @ crop @ up.T


def augment(image: np.ndarray, m: int, seed: int) -> ViewSet:
    """Original plus ``m`` crops/flips, deterministic in ``seed``."""
    if m < 1:
        raise ValueError(f"need at least one augmented view, got m={m}")
    image = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(seed)
    views = np.empty((m + 1,) + image.shape)
    views[0] = image
    for j in range(1, m + 1):
        v = random_resized_crop(image, rng)
        if rng.uniform() < FLIP_PROB:
            v = v[:, ::-1]
        views[j] = v
    return views_set_clipped(views)


def views_set_clipped(views: np.ndarray) -> ViewSet:
    return ViewSet(views=np.clip(views, 0.0, 1.0))


def selection_count(tau: float, num_views: int) -> int:
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    if tau * num_views < 1.0:
        raise ValueError(
            f"tau={tau} with {num_views} views selects fewer than one view; "
            f"raise tau or the view count"
        )
    return math.ceil(tau * num_views)


def select_low_entropy(entropies: np.ndarray, tau: float) -> np.ndarray:
    """Indices of the ceil(tau * n) lowest-entropy views.

    Ties break toward the lower view index, so the original view (index 0)
    wins any tie it is part of.
    """
    entropies = np.asarray(entropies, dtype=np.float64)
    n_sel = selection_count(tau, entropies.shape[0])
    order = np.lexsort((np.arange(entropies.shape[0]), entropies))
    return np.sort(order[:n_sel])


def prediction_entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy per row of a (N, K) probability matrix."""
    p = np.clip(probs, 1e-300, None)
    return -(p * np.log(p)).sum(axis=-1)
