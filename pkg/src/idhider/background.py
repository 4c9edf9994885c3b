"""Background replacement: give the protected face the original's background.

The composite takes background pixels (outside head and neck in both images)
from the original, head/neck pixels from the protected face, and fills the few
pixels covered by neither via iterative neighbor-mean diffusion.
"""

from __future__ import annotations

import numpy as np

from .backbones import parse_face
from .corpus import BACKGROUND_CLASS


def head_neck_mask(parser, image: np.ndarray) -> np.ndarray:
    """1 on every non-background parsing class, else 0 (uint8 H x W)."""
    _, seg = parse_face(parser, image)
    return (seg != BACKGROUND_CLASS).astype(np.uint8)


def mask_from_parsing(parsing: np.ndarray) -> np.ndarray:
    """Ground-truth variant of head_neck_mask for records with exact parsing."""
    return (parsing != BACKGROUND_CLASS).astype(np.uint8)


def complement(mask: np.ndarray) -> np.ndarray:
    return ((mask + 1) % 2).astype(np.uint8)


def compose_background(x_i: np.ndarray, x_p: np.ndarray,
                       hn_i: np.ndarray, hn_p: np.ndarray):
    """The raw composite and its blank mask, before inpainting.

    Composite = (background in both) * x_i + (head/neck of x_p) * x_p; pixels in
    neither region stay zero and are flagged blank.
    """
    if x_i.shape != x_p.shape:
        raise ValueError(f"image dims differ: {x_i.shape} vs {x_p.shape}")
    if hn_i.shape != x_i.shape[:2] or hn_p.shape != x_p.shape[:2]:
        raise ValueError("mask dims must match image dims")
    both_bg = complement(hn_p) * complement(hn_i)
    composite = (both_bg[..., None] * x_i + hn_p[..., None] * x_p).astype(np.float32)
    blank = ((both_bg == 0) & (hn_p == 0)).astype(np.uint8)
    return composite, blank


def inpaint(image: np.ndarray, blank: np.ndarray, tol: float = 1e-4,
            max_iters: int = 500) -> np.ndarray:
    """Fill blank pixels by repeated 4-neighbor averaging; others are untouched."""
    if blank.shape != image.shape[:2]:
        raise ValueError("blank mask dims must match image dims")
    out = image.astype(np.float32).copy()
    hole = blank.astype(bool)
    if not hole.any():
        return out
    known = ~hole
    if not known.any():
        return out
    out[hole] = out[known].mean(axis=0)
    ones = np.pad(np.ones(blank.shape, dtype=np.float32), 1, mode="constant")
    n_count = (ones[:-2, 1:-1] + ones[2:, 1:-1] + ones[1:-1, :-2] + ones[1:-1, 2:])
    for _ in range(max_iters):
        padded = np.pad(out, ((1, 1), (1, 1), (0, 0)), mode="constant")
        neighbor_sum = (padded[:-2, 1:-1] + padded[2:, 1:-1]
                        + padded[1:-1, :-2] + padded[1:-1, 2:])
        new_vals = neighbor_sum[hole] / n_count[hole][..., None]
        delta = np.abs(new_vals - out[hole]).max()
        out[hole] = new_vals
        if delta < tol:
            break
    return out


def replace_background(x_i: np.ndarray, x_p: np.ndarray, parser) -> np.ndarray:
    """Algorithm: masks from the parser, composite, then diffusion fill."""
    hn_p = head_neck_mask(parser, x_p)
    hn_i = head_neck_mask(parser, x_i)
    composite, blank = compose_background(x_i, x_p, hn_i, hn_p)
    return inpaint(composite, blank)
