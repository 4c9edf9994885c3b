"""Virtual face generation: latent mapper training and inference.

The mapper projects a face into the style generator's input latent space so the
synthesized "virtual" face keeps a similar parsing map while everything else
(colors, hair, background) is free to change. Training minimizes a hard-pixel
mined parsing cross-entropy plus a squared-distance pull toward the mean latent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backbones import LatentCode, MapperBackbone, StyleGenerator
from .util import TrainLog, from_tensor, to_batch, to_tensor


class NumericError(RuntimeError):
    """Training hit a non-finite loss; message carries the step index."""


@dataclass
class MapperConfig:
    lambda_reg: float = 30.0
    learning_rate: float = 1e-4
    batch_size: int = 16
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    mean_latent_samples: int = 4096
    ohem_keep_fraction: float = 0.25
    steps: int = 500

    def __post_init__(self):
        if self.lambda_reg < 0 or self.learning_rate <= 0 or self.batch_size <= 0:
            raise ValueError("mapper config values must be positive")
        if not 0.0 < self.ohem_keep_fraction <= 1.0:
            raise ValueError("ohem_keep_fraction must lie in (0, 1]")
        if self.mean_latent_samples < 1 or self.steps < 0:
            raise ValueError("mean_latent_samples must be >= 1 and steps >= 0")


def mean_latent(generator, n: int, seed: int = 0) -> LatentCode:
    """Arithmetic mean of n INPUT-space samples from the generator's sampler."""
    if n < 1:
        raise ValueError("mean_latent needs n >= 1")
    with torch.no_grad():
        z = generator.sample_input(n, seed)
    return LatentCode(space="INPUT", data=z.mean(dim=0))


def ohem_parse_loss(pred_logits: torch.Tensor, target, keep_fraction: float = 0.25):
    """Multiclass cross-entropy over the hardest `keep_fraction` of pixels.

    Accepts (C, H, W) or (B, C, H, W) logits with a matching (…, H, W) target.
    keep_fraction=1 is plain mean cross-entropy.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    if pred_logits.ndim == 3:
        pred_logits = pred_logits[None]
        target = target[None] if getattr(target, "ndim", 2) == 2 else target
    if isinstance(target, np.ndarray):
        target = torch.from_numpy(np.ascontiguousarray(target))
    target = target.long()
    n_cls = pred_logits.shape[1]
    if target.min() < 0 or target.max() >= n_cls:
        raise ValueError(
            f"target classes outside [0, {n_cls}): "
            f"min={int(target.min())}, max={int(target.max())}")
    if target.shape != (pred_logits.shape[0],) + pred_logits.shape[2:]:
        raise ValueError("logits and target are not spatially aligned")
    per_pixel = F.cross_entropy(pred_logits, target, reduction="none").reshape(-1)
    keep = max(1, int(math.ceil(keep_fraction * per_pixel.numel())))
    hardest, _ = torch.topk(per_pixel, keep)
    return hardest.mean()


def latent_reg_loss(z, z_mean):
    """Squared L2 distance to the mean code, summed over components.

    Batched (B, D) inputs are averaged over the batch dimension.
    """
    zt = z.data if isinstance(z, LatentCode) else z
    mt = z_mean.data if isinstance(z_mean, LatentCode) else z_mean
    diff = zt - mt
    if diff.ndim == 1:
        return (diff * diff).sum()
    return (diff * diff).sum(dim=-1).mean()


def mapper_objective(parse_loss, reg_loss, lambda_reg):
    return parse_loss + lambda_reg * reg_loss


def train_mapper(bundle, records, config: MapperConfig, seed: int = 0) -> TrainLog:
    """Optimize only the mapper; parser and generator stay frozen.

    Targets are the records' ground-truth parsing maps. Returns the per-step
    loss log; the mapper is updated in place.
    """
    mapper: MapperBackbone = bundle.mapper_backbone
    generator: StyleGenerator = bundle.style_generator
    parser = bundle.face_parser
    generator.eval()
    parser.eval()
    for module in (generator, parser):
        for p in module.parameters():
            p.requires_grad_(False)

    z_mean = mean_latent(generator, config.mean_latent_samples, seed=seed).data
    opt = torch.optim.Adam(mapper.parameters(), lr=config.learning_rate,
                           betas=(config.adam_beta1, config.adam_beta2))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 0x3A99]))
    images = to_batch([r.image for r in records])
    targets = torch.from_numpy(np.stack([r.parsing for r in records])).long()

    log = TrainLog(columns=["step", "total", "parse", "reg"])
    for step in range(config.steps):
        idx = rng.choice(len(records), size=min(config.batch_size, len(records)),
                         replace=False)
        x = images[idx]
        z = mapper(x)
        x_v = generator.synthesize(generator.lift(z), noise_seed=seed + step)
        logits = parser(x_v)
        parse = ohem_parse_loss(logits, targets[idx], config.ohem_keep_fraction)
        reg = latent_reg_loss(z, z_mean)
        total = mapper_objective(parse, reg, config.lambda_reg)
        if not torch.isfinite(total):
            raise NumericError(f"non-finite mapper loss at step {step}")
        opt.zero_grad()
        total.backward()
        opt.step()
        log.append(step, total.item(), parse.item(), reg.item())

    for module in (generator, parser):
        for p in module.parameters():
            p.requires_grad_(True)
    return log


def map_latent(mapper: MapperBackbone, image: np.ndarray) -> LatentCode:
    """Project one face into the generator's INPUT latent space."""
    with torch.no_grad():
        z = mapper(to_tensor(image)[None])[0]
    return LatentCode(space="INPUT", data=z)


def generate_virtual(mapper: MapperBackbone, generator: StyleGenerator,
                     image: np.ndarray, noise_seed: int = 0) -> np.ndarray:
    """The virtual face: synthesize from the mapped latent code."""
    with torch.no_grad():
        z = mapper(to_tensor(image)[None])
        x_v = generator.synthesize(generator.lift(z), noise_seed=noise_seed)[0]
    return from_tensor(x_v)
