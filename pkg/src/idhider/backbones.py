"""Trainable network contracts: style generator, parser, encoders, fusion, discriminators.

All nets are deliberately small (64x64 images, tens of channels) so the whole
pipeline trains on a single CPU core. Every forward pass is deterministic given
parameters, inputs, and explicit noise seeds; there is no batch norm or dropout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .util import from_tensor, to_tensor

ARCH_DEFAULTS = {
    "image_size": 64,
    "n_cls": 7,
    "z_dim": 64,
    "w_dim": 64,
    "id_dim": 64,
    "pyramid_depth": 4,
    "m_scales": 2,
}


# ---------------------------------------------------------------------------
# latent / embedding / pyramid value types
# ---------------------------------------------------------------------------

@dataclass
class LatentCode:
    """A latent code tagged with its space: INPUT (one vector) or STYLE (L rows)."""

    space: str                  # "INPUT" | "STYLE"
    data: torch.Tensor          # (D,) for INPUT, (L, D) for STYLE

    def __post_init__(self):
        if self.space not in ("INPUT", "STYLE"):
            raise ValueError(f"unknown latent space {self.space!r}")
        want = 1 if self.space == "INPUT" else 2
        if self.data.ndim != want:
            raise ValueError(
                f"{self.space} code must have {want} dims, got shape {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("latent code contains non-finite entries")


@dataclass
class IdentityEmbedding:
    """Unit-norm identity feature vector."""

    vec: torch.Tensor

    def __post_init__(self):
        norm = float(self.vec.norm())
        if abs(norm - 1.0) > 1e-5:
            raise ValueError(f"identity embedding norm {norm} is not 1 +/- 1e-5")


@dataclass
class FeaturePyramid:
    """Multi-level attribute features, coarsest to finest."""

    levels: list = field(default_factory=list)

    def __post_init__(self):
        for prev, cur in zip(self.levels, self.levels[1:]):
            if cur.shape[-1] != 2 * prev.shape[-1] or cur.shape[-2] != 2 * prev.shape[-2]:
                raise ValueError("pyramid level dims must double from coarsest to finest")

    def __len__(self):
        return len(self.levels)


# ---------------------------------------------------------------------------
# style-based generator
# ---------------------------------------------------------------------------

class _StyleBlock(nn.Module):
    """conv -> instance norm -> per-layer style affine -> noise -> activation."""

    def __init__(self, c_in, c_out, w_dim, upsample):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(c_in, c_out, 3, 1, 1)
        self.style = nn.Linear(w_dim, 2 * c_out)
        self.noise_weight = nn.Parameter(torch.zeros(1))

    def forward(self, h, w_row, noise):
        if self.upsample:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv(h)
        h = F.instance_norm(h)
        gamma, beta = self.style(w_row).chunk(2, dim=1)
        h = (1.0 + gamma[..., None, None]) * h + beta[..., None, None]
        if noise is not None:
            h = h + self.noise_weight * noise
        return F.leaky_relu(h, 0.2)


class StyleGenerator(nn.Module):
    """Toy style-based synthesis net: z -> per-layer style rows -> image in [0,1]."""

    CHANNELS = (64, 64, 48, 32, 24)

    def __init__(self, z_dim=64, w_dim=64, image_size=64):
        super().__init__()
        n_up = int(math.log2(image_size // 4))
        chans = self.CHANNELS[:n_up + 1]
        self.z_dim, self.w_dim, self.image_size = z_dim, w_dim, image_size
        self.layer_count = len(chans)
        self.lift_net = nn.Sequential(
            nn.Linear(z_dim, 128), nn.LeakyReLU(0.2),
            nn.Linear(128, self.layer_count * w_dim))
        self.const = nn.Parameter(torch.randn(1, chans[0], 4, 4))
        self.blocks = nn.ModuleList(
            _StyleBlock(chans[max(i - 1, 0)], chans[i], w_dim, upsample=i > 0)
            for i in range(self.layer_count))
        self.to_rgb = nn.Conv2d(chans[-1], 3, 1)

    def sample_input(self, n: int, seed: int) -> torch.Tensor:
        gen = torch.Generator().manual_seed(int(seed))
        return torch.randn(n, self.z_dim, generator=gen)

    def lift(self, z: torch.Tensor) -> torch.Tensor:
        """(B, z_dim) -> (B, L, w_dim) per-layer style rows."""
        return self.lift_net(z).view(z.shape[0], self.layer_count, self.w_dim)

    def synthesize(self, w_rows: torch.Tensor, noise_seed: int = 0) -> torch.Tensor:
        gen = torch.Generator().manual_seed(int(noise_seed))
        h = self.const.expand(w_rows.shape[0], -1, -1, -1)
        for i, block in enumerate(self.blocks):
            res = 4 * (2 ** i) if i > 0 else 4
            noise = torch.randn(1, 1, res, res, generator=gen)
            h = block(h, w_rows[:, i], noise)
        img = torch.sigmoid(self.to_rgb(h))
        return torch.clamp(img, 0.0, 1.0)

    def forward(self, z: torch.Tensor, noise_seed: int = 0) -> torch.Tensor:
        return self.synthesize(self.lift(z), noise_seed=noise_seed)


def synth_face(generator: StyleGenerator, code: LatentCode, noise_seed: int = 0) -> np.ndarray:
    """Render one face from an INPUT or STYLE code; INPUT codes are lifted first."""
    with torch.no_grad():
        if code.space == "INPUT":
            if code.data.shape[0] != generator.z_dim:
                raise ValueError(
                    f"INPUT code has dim {code.data.shape[0]}, generator expects "
                    f"{generator.z_dim}")
            rows = generator.lift(code.data[None])
        else:
            if code.data.shape[0] != generator.layer_count:
                raise ValueError(
                    f"STYLE code has {code.data.shape[0]} rows, generator expects "
                    f"{generator.layer_count}")
            rows = code.data[None]
        img = generator.synthesize(rows, noise_seed=noise_seed)[0]
    return from_tensor(img)


# ---------------------------------------------------------------------------
# face parser (mini U-Net)
# ---------------------------------------------------------------------------

class FaceParser(nn.Module):
    def __init__(self, n_cls=7):
        super().__init__()
        self.n_cls = n_cls
        act = nn.LeakyReLU(0.2)
        self.e0 = nn.Sequential(nn.Conv2d(3, 16, 3, 1, 1), act)
        self.e1 = nn.Sequential(nn.Conv2d(16, 32, 3, 2, 1), act)
        self.e2 = nn.Sequential(nn.Conv2d(32, 48, 3, 2, 1), act)
        self.mid = nn.Sequential(nn.Conv2d(48, 48, 3, 1, 1), act)
        self.d1 = nn.Sequential(nn.Conv2d(48 + 32, 32, 3, 1, 1), act)
        self.d0 = nn.Sequential(nn.Conv2d(32 + 16, 24, 3, 1, 1), act)
        self.head = nn.Conv2d(24, n_cls, 1)

    def forward(self, x):
        h0 = self.e0(x)
        h1 = self.e1(h0)
        h2 = self.mid(self.e2(h1))
        u1 = self.d1(torch.cat([F.interpolate(h2, scale_factor=2, mode="nearest"), h1], 1))
        u0 = self.d0(torch.cat([F.interpolate(u1, scale_factor=2, mode="nearest"), h0], 1))
        return self.head(u0)


def parse_face(parser: FaceParser, image: np.ndarray):
    """Returns (per-pixel class logits, argmax map). Ties pick the lowest class."""
    with torch.no_grad():
        logits = parser(to_tensor(image)[None])[0]
    logits_np = logits.numpy().astype(np.float32)
    seg = np.argmax(logits_np, axis=0).astype(np.uint8)
    return logits_np, seg


# ---------------------------------------------------------------------------
# identity encoder
# ---------------------------------------------------------------------------

class IdentityEncoder(nn.Module):
    """CNN embedding trained with a margin-based classifier; output is L2-normalized."""

    def __init__(self, id_dim=64, widths=(24, 48, 64, 96)):
        super().__init__()
        act = nn.LeakyReLU(0.2)
        layers = []
        c_in = 3
        for w in widths:
            layers += [nn.Conv2d(c_in, w, 3, 2, 1), act]
            c_in = w
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(widths[-1], id_dim)

    def forward(self, x):
        h = self.body(x).mean(dim=(2, 3))
        e = self.fc(h)
        return F.normalize(e, dim=1, eps=1e-8)


class MarginHead(nn.Module):
    """Additive-margin softmax logits over identity classes (training only)."""

    def __init__(self, id_dim, n_classes, scale=16.0, margin=0.25):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_classes, id_dim))
        self.scale, self.margin = scale, margin

    def forward(self, emb, labels):
        cos = emb @ F.normalize(self.weight, dim=1).t()
        onehot = F.one_hot(labels, cos.shape[1]).to(cos.dtype)
        return self.scale * (cos - self.margin * onehot)


def embed_identity(encoder: IdentityEncoder, image: np.ndarray) -> IdentityEmbedding:
    with torch.no_grad():
        vec = encoder(to_tensor(image)[None])[0]
    return IdentityEmbedding(vec=vec)


# ---------------------------------------------------------------------------
# attribute encoder (U-Net-like, multi-level output)
# ---------------------------------------------------------------------------

class AttributeEncoder(nn.Module):
    """Emits a feature pyramid (coarsest to finest) from U-Net decoder levels."""

    LEVEL_CHANNELS = (64, 48, 32, 24)

    def __init__(self, depth=4):
        super().__init__()
        if depth != 4:
            raise ValueError("attribute encoder is built for pyramid depth 4")
        act = nn.LeakyReLU(0.2)
        self.e0 = nn.Sequential(nn.Conv2d(3, 16, 3, 1, 1), act)
        self.e1 = nn.Sequential(nn.Conv2d(16, 32, 3, 2, 1), act)
        self.e2 = nn.Sequential(nn.Conv2d(32, 48, 3, 2, 1), act)
        self.e3 = nn.Sequential(nn.Conv2d(48, 64, 3, 2, 1), act)
        self.p0 = nn.Sequential(nn.Conv2d(64, 64, 3, 1, 1), act)
        self.p1 = nn.Sequential(nn.Conv2d(64 + 48, 48, 3, 1, 1), act)
        self.p2 = nn.Sequential(nn.Conv2d(48 + 32, 32, 3, 1, 1), act)
        self.p3 = nn.Sequential(nn.Conv2d(32 + 16, 24, 3, 1, 1), act)
        self.depth = depth

    def forward(self, x):
        h0, h1 = self.e0(x), None
        h1 = self.e1(h0)
        h2 = self.e2(h1)
        lv0 = self.p0(self.e3(h2))
        up = lambda t: F.interpolate(t, scale_factor=2, mode="nearest")
        lv1 = self.p1(torch.cat([up(lv0), h2], 1))
        lv2 = self.p2(torch.cat([up(lv1), h1], 1))
        lv3 = self.p3(torch.cat([up(lv2), h0], 1))
        return [lv0, lv1, lv2, lv3]


def encode_attributes(encoder: AttributeEncoder, image: np.ndarray) -> FeaturePyramid:
    with torch.no_grad():
        levels = encoder(to_tensor(image)[None])
    return FeaturePyramid(levels=[lv[0] for lv in levels])


# ---------------------------------------------------------------------------
# fusion generator (gated identity/attribute denormalization)
# ---------------------------------------------------------------------------

class _FuseBlock(nn.Module):
    """Upsample, then blend identity- and attribute-conditioned normalizations
    through a learned per-position gate."""

    def __init__(self, c_in, c_out, id_dim, attr_ch):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, 1, 1)
        self.id_affine = nn.Linear(id_dim, 2 * c_out)
        self.attr_affine = nn.Conv2d(attr_ch, 2 * c_out, 1)
        self.gate = nn.Conv2d(attr_ch, c_out, 1)

    def forward(self, h, z_id, attr):
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.instance_norm(self.conv(h))
        gi, bi = self.id_affine(z_id).chunk(2, dim=1)
        ga, ba = self.attr_affine(attr).chunk(2, dim=1)
        h_id = (1.0 + gi[..., None, None]) * h + bi[..., None, None]
        h_attr = (1.0 + ga) * h + ba
        g = torch.sigmoid(self.gate(attr))
        return F.leaky_relu(g * h_id + (1.0 - g) * h_attr, 0.2)


class FusionGenerator(nn.Module):
    """Synthesizes a face from an identity embedding and an attribute pyramid."""

    def __init__(self, id_dim=64, image_size=64, level_channels=(64, 48, 32, 24)):
        super().__init__()
        self.image_size = image_size
        self.start_size = image_size // (2 ** len(level_channels))
        self.stem = nn.Linear(id_dim, 64 * self.start_size ** 2)
        chans = (64, 56, 48, 40, 32)
        self.blocks = nn.ModuleList(
            _FuseBlock(chans[i], chans[i + 1], id_dim, level_channels[i])
            for i in range(len(level_channels)))
        self.to_rgb = nn.Conv2d(chans[len(level_channels)], 3, 1)

    def forward(self, z_id, levels):
        h = self.stem(z_id).view(z_id.shape[0], 64, self.start_size, self.start_size)
        for block, lv in zip(self.blocks, levels):
            h = block(h, z_id, lv)
        return torch.sigmoid(self.to_rgb(h))


def fuse_generate(generator: FusionGenerator, id_emb: IdentityEmbedding,
                  pyramid: FeaturePyramid) -> np.ndarray:
    """Convenience single-image wrapper; training uses the module directly."""
    with torch.no_grad():
        img = generator(id_emb.vec[None], [lv[None] for lv in pyramid.levels])[0]
    return from_tensor(img)


# ---------------------------------------------------------------------------
# multiscale discriminators
# ---------------------------------------------------------------------------

class PatchDiscriminator(nn.Module):
    def __init__(self):
        super().__init__()
        act = nn.LeakyReLU(0.2)
        self.net = nn.Sequential(
            nn.Conv2d(3, 24, 3, 2, 1), act,
            nn.Conv2d(24, 48, 3, 2, 1), act,
            nn.Conv2d(48, 64, 3, 2, 1), act,
            nn.Conv2d(64, 1, 3, 1, 1))

    def forward(self, x):
        return self.net(x)


class MultiscaleDiscriminators(nn.Module):
    """M patch discriminators; scale m sees the image average-pooled m times."""

    def __init__(self, m_scales=2):
        super().__init__()
        if m_scales < 1:
            raise ValueError("m_scales must be >= 1")
        self.scales = nn.ModuleList(PatchDiscriminator() for _ in range(m_scales))

    def forward(self, x):
        scores = []
        for disc in self.scales:
            scores.append(disc(x))
            x = F.avg_pool2d(x, 2)
        return scores


def discriminate(discriminators: MultiscaleDiscriminators, image: np.ndarray):
    with torch.no_grad():
        scores = discriminators(to_tensor(image)[None])
    return [s[0].numpy() for s in scores]


# ---------------------------------------------------------------------------
# latent mapper backbone (used by the virtual face module)
# ---------------------------------------------------------------------------

class _ResDown(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, 2, 1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1)
        self.skip = nn.Conv2d(c_in, c_out, 1, 2)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = self.conv2(h)
        return F.leaky_relu(h + self.skip(x), 0.2)


class MapperBackbone(nn.Module):
    """Small residual CNN projecting a face image to an INPUT-space latent."""

    def __init__(self, z_dim=64):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, 24, 3, 1, 1), nn.LeakyReLU(0.2))
        self.stages = nn.Sequential(_ResDown(24, 48), _ResDown(48, 64), _ResDown(64, 96))
        self.fc = nn.Linear(96, z_dim)

    def forward(self, x):
        h = self.stages(self.stem(x)).mean(dim=(2, 3))
        return self.fc(h)


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

@dataclass
class BackboneBundle:
    """All networks the pipeline composes, plus their architecture hyperparameters."""

    style_generator: StyleGenerator
    mapper_backbone: MapperBackbone
    face_parser: FaceParser
    identity_encoder: IdentityEncoder
    heldout_encoder: IdentityEncoder
    attribute_encoder: AttributeEncoder
    fusion_generator: FusionGenerator
    discriminators: MultiscaleDiscriminators
    arch: dict = field(default_factory=dict)

    NAMES = ("style_generator", "mapper_backbone", "face_parser", "identity_encoder",
             "heldout_encoder", "attribute_encoder", "fusion_generator", "discriminators")

    @classmethod
    def build(cls, arch: dict | None = None, seed: int = 0) -> "BackboneBundle":
        a = dict(ARCH_DEFAULTS)
        a.update(arch or {})
        torch.manual_seed(int(seed))
        return cls(
            style_generator=StyleGenerator(a["z_dim"], a["w_dim"], a["image_size"]),
            mapper_backbone=MapperBackbone(a["z_dim"]),
            face_parser=FaceParser(a["n_cls"]),
            identity_encoder=IdentityEncoder(a["id_dim"]),
            heldout_encoder=IdentityEncoder(a["id_dim"], widths=(20, 40, 56, 80)),
            attribute_encoder=AttributeEncoder(a["pyramid_depth"]),
            fusion_generator=FusionGenerator(a["id_dim"], a["image_size"]),
            discriminators=MultiscaleDiscriminators(a["m_scales"]),
            arch=a,
        )

    def modules_dict(self):
        return {name: getattr(self, name) for name in self.NAMES}

    def save(self, path):
        arrays = {}
        for name, module in self.modules_dict().items():
            arrays.update(checkpoint.state_arrays(module, prefix=name + "."))
        checkpoint.save(path, {"kind": "bundle", "arch": self.arch}, arrays)

    @classmethod
    def load(cls, path) -> "BackboneBundle":
        header, arrays = checkpoint.load(path)
        bundle = cls.build(header["arch"], seed=0)
        for name, module in bundle.modules_dict().items():
            checkpoint.load_state(module, arrays, prefix=name + ".")
        return bundle


def save_modules(path, modules: dict, header_extra: dict | None = None):
    """Save named modules into one IDHDR1 checkpoint."""
    arrays = {}
    for name, module in modules.items():
        arrays.update(checkpoint.state_arrays(module, prefix=name + "."))
    header = {"kind": "modules", "names": sorted(modules)}
    header.update(header_extra or {})
    checkpoint.save(path, header, arrays)


def load_modules(path, modules: dict):
    """Load named modules saved by save_modules; returns the checkpoint header."""
    header, arrays = checkpoint.load(path)
    for name, module in modules.items():
        checkpoint.load_state(module, arrays, prefix=name + ".")
    return header
