"""Seed derivation and interpolation helpers shared across modules."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *tags) -> int:
    """Stable 64-bit child seed for a (root seed, purpose tags) pair."""
    digest = hashlib.sha256(repr((int(root),) + tuple(tags)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(root: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *tags))


def bilinear_matrix(out_n: int, in_n: int) -> np.ndarray:
    """(out_n, in_n) row-stochastic bilinear interpolation matrix.

    Resizing a square image is then ``M_h @ img @ M_w.T``, which keeps the
    operation a pair of matrix products (and therefore differentiable in
    the graph without a dedicated kernel).
    """
    m = np.zeros((out_n, in_n))
    for i in range(out_n):
        src = (i + 0.5) * in_n / out_n - 0.5
        lo = int(np.floor(src))
        w = src - lo
        lo_c = min(max(lo, 0), in_n - 1)
        hi_c = min(max(lo + 1, 0), in_n - 1)
        m[i, lo_c] += 1.0 - w
        m[i, hi_c] += w
    return m


def resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    mh = bilinear_matrix(out_h, img.shape[0])
    mw = bilinear_matrix(out_w, img.shape[1])
    return mh @ img @ mw.T
