"""Diverse protection via style mixing: swap a band of per-layer style rows."""

from __future__ import annotations

import torch

from .atm import protect
from .backbones import LatentCode, StyleGenerator
from .util import from_tensor
from .vfgm import map_latent


def lift_to_style(generator: StyleGenerator, code: LatentCode) -> LatentCode:
    """INPUT code -> per-layer STYLE rows through the generator's lifting net."""
    if code.space != "INPUT":
        raise ValueError("lift_to_style expects an INPUT-space code")
    with torch.no_grad():
        rows = generator.lift(code.data[None])[0]
    return LatentCode(space="STYLE", data=rows)


def style_mix(w_src: LatentCode, w_rand: LatentCode, mix_range) -> LatentCode:
    """Rows in [lo, hi) come from w_rand, all others from w_src."""
    if w_src.space != "STYLE" or w_rand.space != "STYLE":
        raise ValueError("style_mix operates on STYLE codes")
    if w_src.data.shape != w_rand.data.shape:
        raise ValueError("style codes must share layer count and width")
    lo, hi = int(mix_range[0]), int(mix_range[1])
    n_rows = w_src.data.shape[0]
    if not 0 <= lo <= hi <= n_rows:
        raise ValueError(f"mix range [{lo}, {hi}) out of bounds for {n_rows} rows")
    rows = w_src.data.clone()
    rows[lo:hi] = w_rand.data[lo:hi]
    return LatentCode(space="STYLE", data=rows)


def default_mix_range(layer_count: int):
    """The reference mixing band (layers 6-14 of an 18-row code) scaled to L rows."""
    lo = round(6 / 18 * layer_count)
    hi = round(14 / 18 * layer_count)
    return lo, hi


def diverse_protect(bundle, x_i, n: int, seed: int = 0, alpha: float = 1.0,
                    mix_range=None):
    """n protected variants of one face, each from a differently mixed virtual face."""
    if n < 1:
        raise ValueError("n must be >= 1")
    generator = bundle.style_generator
    if mix_range is None:
        mix_range = default_mix_range(generator.layer_count)
    w_src = lift_to_style(generator, map_latent(bundle.mapper_backbone, x_i))
    with torch.no_grad():
        z_rand = generator.sample_input(n, seed)
    results = []
    for j in range(n):
        w_rand = lift_to_style(generator, LatentCode(space="INPUT", data=z_rand[j]))
        mixed = style_mix(w_src, w_rand, mix_range)
        with torch.no_grad():
            x_v = from_tensor(generator.synthesize(mixed.data[None], noise_seed=seed)[0])
        results.append(protect(bundle, x_i, x_v, alpha=alpha, run_id=f"diverse-{seed}-{j}"))
    return results
