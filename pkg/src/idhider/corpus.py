"""Synthetic face corpus with exact identity, attribute, and parsing ground truth.

Faces are stylized 2D renders: geometry (face/eye/nose/mouth layout) is a pure
function of the integer identity label, while colors, hair shape, and background
texture are pure functions of a real-valued attribute vector. Parsing maps are
emitted from the same geometry, so segmentation labels are exact by construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .util import atomic_write_bytes, atomic_write_text, canonical_json

ATTR_DIM = 8
GEOM_DIM = 8
BACKGROUND_CLASS = 0

CLASSES_7 = ("background", "skin", "hair", "eyes", "nose", "mouth", "neck")

# 19-class label set, following the common CelebAMask-HQ naming. Classes the
# renderer never draws (glasses, earring, necklace, cloth, hat) stay empty.
CLASSES_19 = (
    "background", "skin", "l_brow", "r_brow", "l_eye", "r_eye", "eye_g",
    "l_ear", "r_ear", "ear_r", "nose", "mouth", "u_lip", "l_lip", "neck",
    "neck_l", "cloth", "hair", "hat",
)


class CorpusError(ValueError):
    """Raised for invalid corpus inputs; message names the offending file/record."""


def class_names(n_cls: int):
    if n_cls == 7:
        return CLASSES_7
    if n_cls == 19:
        return CLASSES_19
    raise CorpusError(f"unsupported parsing label set size {n_cls} (choose 7 or 19)")


@dataclass
class FaceRecord:
    """One face: image, exact parsing map, identity label, and attribute knobs."""

    image: np.ndarray           # (H, W, 3) float32 in [0, 1]
    parsing: np.ndarray         # (H, W) uint8 class indices
    identity_id: int
    attr_params: np.ndarray     # (ATTR_DIM,) in [0, 1]; empty for external records
    source: str = "synthetic"   # "synthetic" | "external"
    name: str = ""

    def validate(self, n_cls: int):
        label = self.name or f"identity {self.identity_id}"
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise CorpusError(f"{label}: image must be (H, W, 3), got {self.image.shape}")
        if self.parsing.shape != self.image.shape[:2]:
            raise CorpusError(
                f"{label}: parsing dims {self.parsing.shape} do not match "
                f"image dims {self.image.shape[:2]}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise CorpusError(f"{label}: image values outside [0, 1]")
        if self.parsing.max(initial=0) >= n_cls:
            raise CorpusError(
                f"{label}: parsing class {int(self.parsing.max())} out of range "
                f"for {n_cls} classes")
        if self.identity_id < 0:
            raise CorpusError(f"{label}: identity_id must be >= 0")
        return self


@dataclass
class VerificationPair:
    """A face pair for verification, tagged with its recognition domain."""

    a: FaceRecord
    b: FaceRecord
    same_identity: bool
    domain: str = "ORIG"        # ORIG | ADR | XDR
    a_protected: bool = False
    b_protected: bool = False

    def __post_init__(self):
        if self.domain not in ("ORIG", "ADR", "XDR"):
            raise ValueError(f"unknown verification domain {self.domain!r}")
        if self.domain == "ADR" and not (self.a_protected and self.b_protected):
            raise ValueError("ADR pairs need both sides protected")
        if self.domain == "XDR" and (self.a_protected == self.b_protected):
            raise ValueError("XDR pairs need exactly one protected side")


# ---------------------------------------------------------------------------
# procedural renderer
# ---------------------------------------------------------------------------

def identity_knobs(identity_id: int) -> np.ndarray:
    """Geometry knobs in (0, 1), a pure function of the identity label."""
    if identity_id < 0:
        raise CorpusError("identity_id must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[0x1D, int(identity_id)]))
    return rng.uniform(0.02, 0.98, size=GEOM_DIM)


def sample_attr_params(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.02, 0.98, size=ATTR_DIM)


def _geometry(g: np.ndarray) -> dict:
    cx, cy = 0.5, 0.47
    fw = 0.26 + 0.12 * g[0]
    fh = 0.30 + 0.12 * g[1]
    return {
        "cx": cx, "cy": cy, "fw": fw, "fh": fh,
        "eye_dx": fw * (0.35 + 0.28 * g[2]),
        "eye_y": cy - fh * (0.10 + 0.22 * g[3]),
        "eye_rx": 0.028 + 0.022 * g[7],
        "nose_len": fh * (0.22 + 0.26 * g[4]),
        "mouth_y": cy + fh * (0.42 + 0.22 * g[5]),
        "mouth_rx": fw * (0.30 + 0.34 * g[6]),
        "mouth_ry": 0.016 + 0.014 * g[5],
        "neck_w": fw * (0.40 + 0.12 * g[1]),
    }


def _ellipse(yy, xx, cx, cy, rx, ry):
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def render_face(geom_knobs: np.ndarray, attr_params: np.ndarray,
                size: int = 64, n_cls: int = 7):
    """Render (image, parsing) from geometry and attribute knobs.

    Returns a float32 image quantized to the 8-bit grid (so disk round-trips
    are lossless) and a uint8 parsing map over the configured label set.
    """
    names = class_names(n_cls)
    a = np.asarray(attr_params, dtype=np.float64)
    if a.shape != (ATTR_DIM,):
        raise CorpusError(f"attr_params must have shape ({ATTR_DIM},), got {a.shape}")
    if a.min() < 0.0 or a.max() > 1.0:
        raise CorpusError("attr_params components must lie in [0, 1]")
    g = np.asarray(geom_knobs, dtype=np.float64)
    if g.shape != (GEOM_DIM,):
        raise CorpusError(f"geom_knobs must have shape ({GEOM_DIM},), got {g.shape}")

    geo = _geometry(g)
    cx, cy, fw, fh = geo["cx"], geo["cy"], geo["fw"], geo["fh"]
    coords = (np.arange(size, dtype=np.float64) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    skin = 0.30 + 0.62 * a[0:3]
    hair_col = 0.05 + 0.85 * a[3:6]
    lip = np.array([0.45 + 0.35 * a[0], 0.16 + 0.10 * a[1], 0.22 + 0.10 * a[2]])

    # background: two-tone stripes, a pure function of the attribute vector
    freq = 2.0 + 5.0 * a[7]
    theta = 0.9 * np.pi * a[7]
    stripe = 0.5 + 0.5 * np.sin(
        2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + 6.0 * a[7])
    bg1 = np.array([0.15 + 0.65 * a[7], 0.30 + 0.35 * a[5], 0.60 - 0.35 * a[7]])
    bg2 = np.array([0.55 - 0.30 * a[5], 0.20 + 0.45 * a[7], 0.30 + 0.40 * a[5]])
    image = stripe[..., None] * bg1 + (1.0 - stripe[..., None]) * bg2
    parsing = np.full((size, size), names.index("background"), dtype=np.uint8)

    def paint(mask, color, cls_name):
        image[mask] = color
        parsing[mask] = names.index(cls_name)

    # neck behind the face, a short column under the chin
    neck = ((np.abs(xx - cx) <= geo["neck_w"])
            & (yy >= cy + 0.55 * fh) & (yy <= min(0.98, cy + fh + 0.12)))
    paint(neck, skin * 0.90, "neck")

    face = _ellipse(yy, xx, cx, cy, fw, fh)
    paint(face, skin, "skin")

    # hair: a rim around the upper head plus a fill above the hairline;
    # thickness/hairline follow one attribute knob so parsing varies mildly
    hw = 0.030 + 0.035 * a[6]
    hairline = cy - fh * (0.62 + 0.10 * a[6])
    rim = _ellipse(yy, xx, cx, cy, fw + hw, fh + hw) & (yy < cy) & ~face
    top = face & (yy < hairline)
    paint(rim | top, hair_col, "hair")

    if n_cls == 19:
        ear_ry = fh * 0.16
        for side, cls_name in ((-1.0, "l_ear"), (1.0, "r_ear")):
            ear = _ellipse(yy, xx, cx + side * fw, geo["eye_y"] + 0.06, fw * 0.13, ear_ry)
            paint(ear, skin * 0.93, cls_name)
        for side, cls_name in ((-1.0, "l_brow"), (1.0, "r_brow")):
            brow = _ellipse(yy, xx, cx + side * geo["eye_dx"],
                            geo["eye_y"] - 2.4 * geo["eye_rx"],
                            geo["eye_rx"] * 1.25, geo["eye_rx"] * 0.30)
            paint(brow, hair_col * 0.85, cls_name)

    eye_names = ("l_eye", "r_eye") if n_cls == 19 else ("eyes", "eyes")
    for side, cls_name in ((-1.0, eye_names[0]), (1.0, eye_names[1])):
        eye = _ellipse(yy, xx, cx + side * geo["eye_dx"], geo["eye_y"],
                       geo["eye_rx"], geo["eye_rx"] * 0.62)
        paint(eye, np.array([0.10, 0.09, 0.12]), cls_name)

    nose_top = cy - fh * 0.04
    nose_w = 0.020 + 0.45 * geo["nose_len"] * 0.18
    within = (yy >= nose_top) & (yy <= nose_top + geo["nose_len"])
    spread = np.clip((yy - nose_top) / max(geo["nose_len"], 1e-6), 0.0, 1.0)
    nose = within & (np.abs(xx - cx) <= nose_w * spread)
    paint(nose, skin * 0.80, "nose")

    mouth = _ellipse(yy, xx, cx, geo["mouth_y"], geo["mouth_rx"], geo["mouth_ry"])
    if n_cls == 19:
        rel = yy - geo["mouth_y"]
        paint(mouth & (rel < -0.3 * geo["mouth_ry"]), lip * 0.85, "u_lip")
        paint(mouth & (np.abs(rel) <= 0.3 * geo["mouth_ry"]), lip * 0.55, "mouth")
        paint(mouth & (rel > 0.3 * geo["mouth_ry"]), lip, "l_lip")
    else:
        paint(mouth, lip, "mouth")

    # radial shading on skin pixels only: parsing is untouched
    skin_cls = names.index("skin")
    r2 = ((xx - cx) / fw) ** 2 + ((yy - cy) / fh) ** 2
    shade = np.where(parsing == skin_cls, 1.05 - 0.18 * r2, 1.0)
    image = image * shade[..., None]

    image = np.clip(np.round(image * 255.0), 0, 255).astype(np.float32) / np.float32(255.0)
    return image, parsing


def generate_synthetic_face(identity_id: int, attr_params, seed: int = 0,
                            size: int = 64, n_cls: int = 7) -> FaceRecord:
    """Deterministic face render; `seed` is reserved and does not alter pixels."""
    attrs = np.asarray(attr_params, dtype=np.float64)
    image, parsing = render_face(identity_knobs(identity_id), attrs, size=size, n_cls=n_cls)
    rec = FaceRecord(image=image, parsing=parsing, identity_id=int(identity_id),
                     attr_params=attrs.astype(np.float32), source="synthetic",
                     name=f"id{identity_id:04d}_s{seed}")
    return rec.validate(n_cls)


def make_corpus(n_identities: int, per_identity: int, seed: int = 0,
                size: int = 64, n_cls: int = 7):
    """Render the full synthetic corpus, deterministic in `seed`."""
    records = []
    for ident in range(n_identities):
        for k in range(per_identity):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, ident, k]))
            rec = generate_synthetic_face(ident, sample_attr_params(rng),
                                          seed=seed, size=size, n_cls=n_cls)
            rec.name = f"id{ident:04d}_{k:02d}"
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# disk interchange: lossless 8-bit rasters + JSON manifest
# ---------------------------------------------------------------------------

def _png_bytes(arr: np.ndarray, mode: str) -> bytes:
    import io
    buf = io.BytesIO()
    PILImage.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def save_corpus(records, out_dir) -> str:
    """Write PNGs + manifest.json (+ meta.json side-car with render parameters)."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = []
    meta = []
    for i, rec in enumerate(records):
        stem = rec.name or f"face{i:05d}"
        img_name, seg_name = f"{stem}.png", f"{stem}_parsing.png"
        img8 = np.clip(np.round(rec.image * 255.0), 0, 255).astype(np.uint8)
        atomic_write_bytes(os.path.join(out_dir, img_name), _png_bytes(img8, "RGB"))
        atomic_write_bytes(os.path.join(out_dir, seg_name), _png_bytes(rec.parsing, "L"))
        manifest.append({"image": img_name, "parsing": seg_name,
                         "identity_id": int(rec.identity_id)})
        meta.append({"name": stem, "identity_id": int(rec.identity_id),
                     "attr_params": [float(v) for v in rec.attr_params],
                     "source": rec.source})
    manifest_path = os.path.join(out_dir, "manifest.json")
    atomic_write_text(manifest_path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    atomic_write_text(os.path.join(out_dir, "meta.json"),
                      canonical_json(meta) + "\n")
    return manifest_path


def load_corpus(path, manifest="manifest.json", n_cls: int = 7):
    """Load records listed in a manifest; ordering follows the manifest."""
    manifest_path = manifest if os.path.isabs(str(manifest)) else os.path.join(path, manifest)
    with open(manifest_path) as fh:
        entries = json.load(fh)
    records = []
    for entry in entries:
        img_file = entry["image"]
        seg_file = entry["parsing"]
        img_path = os.path.join(path, img_file)
        seg_path = os.path.join(path, seg_file)
        for p, f in ((img_path, img_file), (seg_path, seg_file)):
            if not os.path.exists(p):
                raise CorpusError(f"{f}: file not found")
        image = np.asarray(PILImage.open(img_path).convert("RGB"),
                           dtype=np.float32) / np.float32(255.0)
        parsing = np.asarray(PILImage.open(seg_path))
        if parsing.ndim == 3:
            parsing = parsing[..., 0]
        parsing = parsing.astype(np.uint8)
        rec = FaceRecord(image=image, parsing=parsing,
                         identity_id=int(entry["identity_id"]),
                         attr_params=np.zeros(0, dtype=np.float32),
                         source="external", name=img_file)
        try:
            rec.validate(n_cls)
        except CorpusError as err:
            raise CorpusError(f"{img_file}: {err}") from None
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# verification pair sampling
# ---------------------------------------------------------------------------

def sample_verification_pairs(records, n_same: int, n_diff: int, seed: int = 0):
    """Draw non-repeating same/different identity pairs, deterministic in seed."""
    by_identity = {}
    for i, rec in enumerate(records):
        by_identity.setdefault(rec.identity_id, []).append(i)
    if n_diff > 0 and len(by_identity) < 2:
        raise CorpusError(
            "need >= 2 identities for different-identity pairs; "
            f"achievable maxima: n_same={_max_same(by_identity)}, n_diff=0")

    same_candidates = []
    for members in by_identity.values():
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                same_candidates.append((members[i], members[j]))
    n = len(records)
    max_same = len(same_candidates)
    max_diff = n * (n - 1) // 2 - max_same
    if n_same > max_same or n_diff > max_diff:
        raise CorpusError(
            f"infeasible pair counts; achievable maxima: n_same={max_same}, "
            f"n_diff={max_diff}")

    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 0x9A17]))
    pairs = []
    if n_same:
        chosen = rng.choice(max_same, size=n_same, replace=False)
        for idx in chosen:
            i, j = same_candidates[int(idx)]
            pairs.append(VerificationPair(records[i], records[j], True))

    seen = set()
    while sum(1 for p in pairs if not p.same_identity) < n_diff:
        i, j = int(rng.integers(n)), int(rng.integers(n))
        if i == j:
            continue
        key = (min(i, j), max(i, j))
        if key in seen or records[i].identity_id == records[j].identity_id:
            continue
        seen.add(key)
        pairs.append(VerificationPair(records[i], records[j], False))
    return pairs


def _max_same(by_identity):
    return sum(len(m) * (len(m) - 1) // 2 for m in by_identity.values())
