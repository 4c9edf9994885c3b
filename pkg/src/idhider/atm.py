"""Appearance transfer: disentanglement training and face protection.

A frozen identity encoder extracts who the face is; the attribute encoder and
fusion generator learn to rebuild a face that keeps that identity while wearing
the virtual face's appearance. Discriminators use the standard hinge assignment,
real faces in the ReLU(1-.) slot and generated faces in the ReLU(1+.) slot; the
swapped assignment (virtual as real, original as fake) would reward the
discriminator for calling real images fake.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backbones import FeaturePyramid, IdentityEmbedding
from .util import TrainLog, from_tensor, sha256_hex, to_batch, to_tensor
from .vfgm import NumericError


@dataclass
class DisenConfig:
    lambda_id: float = 10.0
    lambda_attr: float = 20.0
    lambda_vs: float = 10.0
    lambda_re: float = 10.0
    learning_rate: float = 4e-4
    batch_size: int = 8
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    m_scales: int = 2
    steps: int = 2000
    use_vs_loss: bool = True
    p_rec: float = 0.2          # per-step probability of the reconstruction branch

    def __post_init__(self):
        for lam in (self.lambda_id, self.lambda_attr, self.lambda_vs, self.lambda_re):
            if lam < 0:
                raise ValueError("loss weights must be >= 0")
        if self.m_scales < 1 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("invalid disentanglement config")
        if not 0.0 <= self.p_rec <= 1.0:
            raise ValueError("p_rec must lie in [0, 1]")


@dataclass
class ProtectionResult:
    protected: np.ndarray       # X_p
    virtual_used: np.ndarray    # X_v
    alpha: float
    id_similarity: float        # cos(E_id(X_i), E_id(X_p))
    run_id: str

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not -1.0 <= self.id_similarity <= 1.0 + 1e-6:
            raise ValueError("id_similarity must lie in [-1, 1]")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def hinge_d_loss(real_scores, fake_scores):
    """Sum over scales of mean ReLU(1 - D(real)) + mean ReLU(1 + D(fake))."""
    if len(real_scores) != len(fake_scores):
        raise ValueError("real/fake score lists must have the same number of scales")
    total = 0.0
    for real, fake in zip(real_scores, fake_scores):
        total = total + F.relu(1.0 - real).mean() + F.relu(1.0 + fake).mean()
    return total


def hinge_g_loss(fake_scores):
    """Generator hinge complement: -sum over scales of mean D(fake)."""
    total = 0.0
    for fake in fake_scores:
        total = total - fake.mean()
    return total


def identity_loss(e1, e2):
    """1 - cosine similarity between two identity embeddings."""
    v1 = e1.vec if isinstance(e1, IdentityEmbedding) else e1
    v2 = e2.vec if isinstance(e2, IdentityEmbedding) else e2
    cos = F.cosine_similarity(v1.reshape(v1.shape[0], -1) if v1.ndim > 1 else v1[None],
                              v2.reshape(v2.shape[0], -1) if v2.ndim > 1 else v2[None],
                              dim=1, eps=1e-8)
    return (1.0 - cos).mean()


def attribute_loss(pyr_a, pyr_b):
    """Half the summed squared difference across all pyramid levels.

    Batched levels (B, C, H, W) are averaged over the batch dimension.
    """
    levels_a = pyr_a.levels if isinstance(pyr_a, FeaturePyramid) else pyr_a
    levels_b = pyr_b.levels if isinstance(pyr_b, FeaturePyramid) else pyr_b
    if len(levels_a) != len(levels_b):
        raise ValueError("pyramid depth mismatch")
    total = 0.0
    for la, lb in zip(levels_a, levels_b):
        if la.shape != lb.shape:
            raise ValueError(f"pyramid level shape mismatch: {tuple(la.shape)} vs {tuple(lb.shape)}")
        sq = (la - lb) ** 2
        if la.ndim == 4:
            total = total + 0.5 * sq.sum(dim=(1, 2, 3)).mean()
        else:
            total = total + 0.5 * sq.sum()
    return total


def _half_sq_sum(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    sq = (a - b) ** 2
    if a.ndim == 4:
        return 0.5 * sq.sum(dim=(1, 2, 3)).mean()
    return 0.5 * sq.sum()


def visual_content_loss(x_p, x_v):
    """Half the summed squared pixel difference between protected and virtual."""
    return _half_sq_sum(x_p, x_v)


def reconstruction_loss(x_i, x_rec):
    """Half the summed squared pixel difference between original and rebuild."""
    return _half_sq_sum(x_i, x_rec)


def disen_objective(adv, id_loss_val, attr_loss_val, vs, re, config: DisenConfig):
    total = (adv + config.lambda_id * id_loss_val + config.lambda_attr * attr_loss_val
             + config.lambda_re * re)
    if config.use_vs_loss:
        total = total + config.lambda_vs * vs
    return total


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_disennet(bundle, records, virtual_images, config: DisenConfig,
                   seed: int = 0) -> TrainLog:
    """Alternating D/G updates for the attribute encoder, fusion generator, and
    discriminators. The identity encoder stays frozen; `virtual_images` are the
    precomputed virtual faces aligned with `records`.
    """
    e_id = bundle.identity_encoder
    e_attr = bundle.attribute_encoder
    gen = bundle.fusion_generator
    disc = bundle.discriminators
    e_id.eval()
    for p in e_id.parameters():
        p.requires_grad_(False)

    opt_g = torch.optim.Adam(list(e_attr.parameters()) + list(gen.parameters()),
                             lr=config.learning_rate,
                             betas=(config.adam_beta1, config.adam_beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.learning_rate,
                             betas=(config.adam_beta1, config.adam_beta2))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 0x0D15]))

    x_all = to_batch([r.image for r in records])
    v_all = to_batch(list(virtual_images))
    if x_all.shape != v_all.shape:
        raise ValueError("virtual images must align with records")

    log = TrainLog(columns=["step", "adv_d", "adv_g", "id", "attr", "vs", "re", "total"])
    for step in range(config.steps):
        idx = rng.choice(len(records), size=min(config.batch_size, len(records)),
                         replace=False)
        recon_step = bool(rng.random() < config.p_rec)
        x_i = x_all[idx]
        attr_src = x_i if recon_step else v_all[idx]

        with torch.no_grad():
            z_id = e_id(x_i)

        # one discriminator update, then one generator update on the same batch
        levels_src = e_attr(attr_src)
        x_p = gen(z_id, levels_src)
        d_loss = hinge_d_loss(disc(x_i), disc(x_p.detach()))
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        adv_g = hinge_g_loss(disc(x_p))
        id_l = identity_loss(e_id(x_p), z_id)
        attr_l = attribute_loss(e_attr(x_p), [lv.detach() for lv in levels_src])
        vs_l = visual_content_loss(x_p, attr_src)
        re_l = reconstruction_loss(x_i, x_p) if recon_step else torch.zeros(())
        total = disen_objective(adv_g, id_l, attr_l, vs_l, re_l, config)
        if not torch.isfinite(total):
            raise NumericError(f"non-finite disentanglement loss at step {step}")
        opt_g.zero_grad()
        total.backward()
        opt_g.step()

        log.append(step, d_loss.item(), adv_g.item(), id_l.item(), attr_l.item(),
                   vs_l.item(), re_l.item(), total.item())

    for p in e_id.parameters():
        p.requires_grad_(True)
    return log


# ---------------------------------------------------------------------------
# protection
# ---------------------------------------------------------------------------

def blend_pyramids(pyr_v: FeaturePyramid, pyr_i: FeaturePyramid, alpha: float):
    """Per-level convex combination: alpha of the virtual face's attributes."""
    levels = [alpha * lv + (1.0 - alpha) * li
              for lv, li in zip(pyr_v.levels, pyr_i.levels)]
    return FeaturePyramid(levels=levels)


def protect(bundle, x_i: np.ndarray, x_v: np.ndarray, alpha: float = 1.0,
            run_id: str = "") -> ProtectionResult:
    """Transfer the virtual face's appearance onto the original's identity."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if x_i.shape != x_v.shape:
        raise ValueError(f"image dims differ: {x_i.shape} vs {x_v.shape}")
    e_id = bundle.identity_encoder
    e_attr = bundle.attribute_encoder
    gen = bundle.fusion_generator
    with torch.no_grad():
        ti, tv = to_tensor(x_i)[None], to_tensor(x_v)[None]
        z_id = e_id(ti)
        levels_i = e_attr(ti)
        levels_v = e_attr(tv)
        blended = [alpha * lv + (1.0 - alpha) * li
                   for lv, li in zip(levels_v, levels_i)]
        x_p = gen(z_id, blended)
        sim = float(F.cosine_similarity(z_id, e_id(x_p), dim=1)[0])
    protected = from_tensor(x_p[0])
    if not run_id:
        run_id = sha256_hex(x_i.tobytes() + x_v.tobytes()
                            + np.float64(alpha).tobytes())[:12]
    return ProtectionResult(protected=protected, virtual_used=x_v, alpha=float(alpha),
                            id_similarity=sim, run_id=run_id)
