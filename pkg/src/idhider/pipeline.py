"""Experiment orchestration: configs, stage training, protection and evaluation runs.

Every stage writes into a directory keyed by a hash of the config slices that
determine its output, so artifacts from incompatible configs can never mix.
Run manifests embed the full config, input hashes, and metric summaries; with a
fixed seed every numeric output is bit-reproducible.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import atm, corpus, diversity, metrics, vfgm
from .backbones import BackboneBundle, MarginHead, load_modules, save_modules
from .background import replace_background
from .util import (TrainLog, atomic_write_bytes, atomic_write_text, canonical_json,
                   config_hash, sha256_hex, to_batch)


class ConfigError(ValueError):
    pass


class MissingStageError(RuntimeError):
    def __init__(self, stage):
        super().__init__(f"missing prerequisite checkpoint for stage '{stage}'")
        self.stage = stage


DEFAULT_CONFIG = {
    "seed": 0,
    "corpus": {
        "n_identities": 20,
        "per_identity": 25,
        "holdout_per_identity": 5,
        "image_size": 64,
        "n_cls": 7,
        "seed": 0,
    },
    "arch": {
        "z_dim": 64,
        "w_dim": 64,
        "id_dim": 64,
        "pyramid_depth": 4,
        "m_scales": 2,
    },
    "parser": {"learning_rate": 2e-3, "batch_size": 16, "steps": 400,
               "ohem_keep_fraction": 1.0},
    "identity": {"learning_rate": 2e-3, "batch_size": 32, "steps": 400,
                 "scale": 16.0, "margin": 0.25},
    "generator": {"learning_rate": 2e-3, "batch_size": 16, "steps": 1200,
                  "train_samples": 1024},
    # mapper / disennet defaults follow the reference training recipe
    "mapper": {"lambda_reg": 30.0, "learning_rate": 1e-4, "batch_size": 16,
               "adam_beta1": 0.0, "adam_beta2": 0.99, "mean_latent_samples": 4096,
               "ohem_keep_fraction": 0.25, "steps": 500},
    "disennet": {"lambda_id": 10.0, "lambda_attr": 20.0, "lambda_vs": 10.0,
                 "lambda_re": 10.0, "learning_rate": 4e-4, "batch_size": 8,
                 "adam_beta1": 0.0, "adam_beta2": 0.99, "m_scales": 2,
                 "steps": 2000, "use_vs_loss": True, "p_rec": 0.2},
    "protect": {"alpha": 1.0},
    "evaluate": {"n_same": 200, "n_diff": 200, "tau": 0.74},
}

# Desk-scale profile: the reference loss weights assume element-sum reductions at
# 256px; at 64px the pixel/feature sums dwarf the unit-scale terms, so the toy
# profile rebalances them (and shortens schedules) to train in minutes on a CPU.
TOY_OVERRIDES = {
    "mapper": {"lambda_reg": 0.05, "learning_rate": 1e-3, "steps": 900},
    "disennet": {"lambda_id": 4.0, "lambda_attr": 2e-3, "lambda_vs": 1e-2,
                 "lambda_re": 2e-2, "learning_rate": 1e-3, "steps": 1400,
                 "p_rec": 0.3},
    "generator": {"steps": 1500},
    "parser": {"steps": 800, "ohem_keep_fraction": 0.5},
    "identity": {"steps": 500},
}

STAGES = ("parser", "identity", "generator", "mapper", "disennet")

_STAGE_DEPS = {
    "parser": (),
    "identity": (),
    "generator": (),
    "mapper": ("parser", "generator"),
    "disennet": ("identity", "generator", "mapper"),
}


def merge_config(base: dict, overrides: dict) -> dict:
    out = json.loads(json.dumps(base))
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], val)
        else:
            out[key] = val
    return out


def validate_config(cfg: dict, template: dict | None = None, path: str = ""):
    """Reject keys that are not part of the config schema."""
    template = DEFAULT_CONFIG if template is None else template
    for key, val in cfg.items():
        where = f"{path}.{key}" if path else key
        if key not in template:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(template[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where} must be a section")
            validate_config(val, template[key], where)
    return cfg


def toy_config(seed: int = 0) -> dict:
    cfg = merge_config(DEFAULT_CONFIG, TOY_OVERRIDES)
    cfg["seed"] = seed
    return cfg


def apply_overrides(cfg: dict, assignments) -> dict:
    """Apply dotted key=value overrides (values parsed as JSON when possible)."""
    out = json.loads(json.dumps(cfg))
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        probe = DEFAULT_CONFIG
        for part in parts[:-1]:
            if not isinstance(probe, dict) or part not in probe:
                raise ConfigError(f"unknown config key: {key}")
            probe = probe[part]
            node = node.setdefault(part, {})
        if not isinstance(probe, dict) or parts[-1] not in probe:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return out


_HASH_SLICES = {
    "corpus": ("corpus",),
    "parser": ("corpus", "arch", "parser"),
    "identity": ("corpus", "arch", "identity"),
    "generator": ("corpus", "arch", "generator"),
    "mapper": ("corpus", "arch", "parser", "generator", "mapper"),
    "disennet": ("corpus", "arch", "parser", "generator", "mapper", "identity",
                 "disennet"),
}


def stage_hash(stage: str, cfg: dict) -> str:
    sliced = {"seed": cfg.get("seed", 0)}
    for name in _HASH_SLICES[stage]:
        sliced[name] = cfg[name]
    return config_hash(sliced)[:12]


def stage_dir(workdir, stage: str, cfg: dict) -> str:
    return os.path.join(workdir, f"{stage}-{stage_hash(stage, cfg)}")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch is not None else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


@dataclass
class RunManifest:
    run_id: str
    command: str
    config_hash: str
    seed: int
    config: dict
    artifacts: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    timestamps: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "run_id": self.run_id, "command": self.command,
            "config_hash": self.config_hash, "seed": self.seed,
            "config": self.config, "artifacts": self.artifacts,
            "metrics": self.metrics, "inputs": self.inputs,
            "timestamps": self.timestamps,
        }
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"

    def write(self, path):
        atomic_write_text(path, self.to_json())


def new_manifest(command: str, cfg: dict) -> RunManifest:
    h = config_hash(cfg)
    return RunManifest(
        run_id=f"{command}-{h[:12]}-s{cfg.get('seed', 0)}",
        command=command, config_hash=h, seed=int(cfg.get("seed", 0)), config=cfg,
        timestamps={"started": _timestamp()})


def _rel(path, base) -> str:
    """Artifact paths are stored relative to the manifest so reruns compare equal."""
    return os.path.relpath(os.fspath(path), os.fspath(base))


# ---------------------------------------------------------------------------
# corpus access
# ---------------------------------------------------------------------------

def build_corpus(cfg: dict):
    c = cfg["corpus"]
    return corpus.make_corpus(c["n_identities"], c["per_identity"],
                              seed=c["seed"], size=c["image_size"], n_cls=c["n_cls"])


def split_corpus(records, cfg: dict):
    """Last `holdout_per_identity` images of each identity form the held-out set."""
    c = cfg["corpus"]
    per, hold = c["per_identity"], c["holdout_per_identity"]
    train, held = [], []
    for i, rec in enumerate(records):
        (held if (i % per) >= per - hold else train).append(rec)
    return train, held


# ---------------------------------------------------------------------------
# bundle wiring
# ---------------------------------------------------------------------------

_STAGE_MODULES = {
    "parser": ("face_parser",),
    "identity": ("identity_encoder", "heldout_encoder"),
    "generator": ("style_generator",),
    "mapper": ("mapper_backbone",),
    "disennet": ("attribute_encoder", "fusion_generator", "discriminators"),
}


def build_bundle(cfg: dict) -> BackboneBundle:
    arch = dict(cfg["arch"])
    arch["image_size"] = cfg["corpus"]["image_size"]
    arch["n_cls"] = cfg["corpus"]["n_cls"]
    return BackboneBundle.build(arch, seed=cfg.get("seed", 0))


def save_stage(bundle: BackboneBundle, stage: str, cfg: dict, workdir,
               log: TrainLog | None = None) -> str:
    sdir = stage_dir(workdir, stage, cfg)
    os.makedirs(sdir, exist_ok=True)
    modules = {name: getattr(bundle, name) for name in _STAGE_MODULES[stage]}
    path = os.path.join(sdir, "checkpoint.idh")
    save_modules(path, modules, {"stage": stage, "arch": bundle.arch})
    if log is not None:
        log.save(os.path.join(sdir, "trainlog.csv"))
    return path


def load_stage(bundle: BackboneBundle, stage: str, cfg: dict, workdir):
    path = os.path.join(stage_dir(workdir, stage, cfg), "checkpoint.idh")
    if not os.path.exists(path):
        raise MissingStageError(stage)
    modules = {name: getattr(bundle, name) for name in _STAGE_MODULES[stage]}
    load_modules(path, modules)
    return bundle


def load_stages(bundle: BackboneBundle, stages, cfg: dict, workdir):
    for stage in stages:
        load_stage(bundle, stage, cfg, workdir)
    return bundle


def stage_is_cached(stage: str, cfg: dict, workdir) -> bool:
    return os.path.exists(os.path.join(stage_dir(workdir, stage, cfg), "checkpoint.idh"))


# ---------------------------------------------------------------------------
# data augmentation for encoder robustness
# ---------------------------------------------------------------------------

_BLUR_KERNEL = torch.tensor([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0


def _blur(x):
    k = _BLUR_KERNEL.to(x.dtype).expand(x.shape[1], 1, 3, 3)
    return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), k, groups=x.shape[1])


def augment_batch(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Color jitter + optional blur + noise; keeps geometry (identity) intact."""
    b = x.shape[0]
    gain = 1.0 + 0.5 * (torch.rand(b, 3, 1, 1, generator=gen) - 0.5)
    shift = 0.3 * (torch.rand(b, 3, 1, 1, generator=gen) - 0.5)
    out = x * gain + shift
    if torch.rand((), generator=gen) < 0.5:
        out = _blur(out)
    out = out + 0.03 * torch.randn(out.shape, generator=gen)
    return out.clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------

def train_parser_stage(bundle, records, cfg, seed) -> TrainLog:
    p = cfg["parser"]
    parser = bundle.face_parser
    opt = torch.optim.Adam(parser.parameters(), lr=p["learning_rate"])
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 0x9A25]))
    gen = torch.Generator().manual_seed(seed + 11)
    images = to_batch([r.image for r in records])
    targets = torch.from_numpy(np.stack([r.parsing for r in records])).long()
    log = TrainLog(columns=["step", "loss"])
    for step in range(p["steps"]):
        idx = rng.choice(len(records), size=min(p["batch_size"], len(records)),
                         replace=False)
        x = augment_batch(images[idx], gen)
        loss = vfgm.ohem_parse_loss(parser(x), targets[idx], p["ohem_keep_fraction"])
        if not torch.isfinite(loss):
            raise vfgm.NumericError(f"non-finite parser loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append(step, loss.item())
    return log


def _train_one_encoder(encoder, records, cfg, seed, n_identities) -> TrainLog:
    p = cfg["identity"]
    torch.manual_seed(seed + 101)
    head = MarginHead(encoder.fc.out_features, n_identities,
                      scale=p["scale"], margin=p["margin"])
    opt = torch.optim.Adam(list(encoder.parameters()) + list(head.parameters()),
                           lr=p["learning_rate"])
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 0x1D5E]))
    gen = torch.Generator().manual_seed(seed + 13)
    images = to_batch([r.image for r in records])
    labels = torch.tensor([r.identity_id for r in records], dtype=torch.long)
    log = TrainLog(columns=["step", "loss"])
    for step in range(p["steps"]):
        idx = rng.choice(len(records), size=min(p["batch_size"], len(records)),
                         replace=False)
        x = augment_batch(images[idx], gen)
        logits = head(encoder(x), labels[idx])
        loss = F.cross_entropy(logits, labels[idx])
        if not torch.isfinite(loss):
            raise vfgm.NumericError(f"non-finite identity loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append(step, loss.item())
    return log


def train_identity_stage(bundle, records, cfg, seed) -> TrainLog:
    n_ids = cfg["corpus"]["n_identities"]
    log = _train_one_encoder(bundle.identity_encoder, records, cfg, seed, n_ids)
    held_log = _train_one_encoder(bundle.heldout_encoder, records, cfg, seed + 7919, n_ids)
    for step, loss in zip(held_log.column("step"), held_log.column("loss")):
        log.append(len(log.rows), loss)
    return log


def _knob_latents(cfg, seed):
    """Render targets paired with probit-embedded knob latents for the generator."""
    g = cfg["generator"]
    c = cfg["corpus"]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 0x6E4A]))
    n = g["train_samples"]
    geo = rng.uniform(0.02, 0.98, size=(n, corpus.GEOM_DIM))
    attrs = rng.uniform(0.02, 0.98, size=(n, corpus.ATTR_DIM))
    imgs = [corpus.render_face(geo[i], attrs[i], size=c["image_size"], n_cls=c["n_cls"])[0]
            for i in range(n)]
    z_dim = cfg["arch"]["z_dim"]
    knobs = torch.from_numpy(np.concatenate([geo, attrs], axis=1)).float()
    z = torch.empty(n, z_dim)
    z[:, :knobs.shape[1]] = torch.special.ndtri(knobs)
    rest = rng.standard_normal(size=(n, z_dim - knobs.shape[1]))
    z[:, knobs.shape[1]:] = torch.from_numpy(rest).float()
    return z, to_batch(imgs)


def train_generator_stage(bundle, cfg, seed) -> TrainLog:
    """Supervised neural-renderer pretraining: knob latents -> rendered faces."""
    g = cfg["generator"]
    net = bundle.style_generator
    z, targets = _knob_latents(cfg, seed)
    opt = torch.optim.Adam(net.parameters(), lr=g["learning_rate"])
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 0x57A9]))
    log = TrainLog(columns=["step", "loss"])
    for step in range(g["steps"]):
        idx = rng.choice(z.shape[0], size=min(g["batch_size"], z.shape[0]),
                         replace=False)
        out = net.synthesize(net.lift(z[idx]), noise_seed=seed + step)
        loss = F.mse_loss(out, targets[idx])
        if not torch.isfinite(loss):
            raise vfgm.NumericError(f"non-finite generator loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append(step, loss.item())
    return log


def virtual_batch(bundle, images, noise_seed: int = 0, chunk: int = 32):
    """Virtual faces for a list of images, batched for speed."""
    out = []
    with torch.no_grad():
        for i in range(0, len(images), chunk):
            x = to_batch(images[i:i + chunk])
            z = bundle.mapper_backbone(x)
            xv = bundle.style_generator.synthesize(
                bundle.style_generator.lift(z), noise_seed=noise_seed)
            out.extend(np.clip(t.numpy().transpose(1, 2, 0), 0, 1).astype(np.float32)
                       for t in xv)
    return out


def run_train(stage: str, cfg: dict, workdir, force: bool = False) -> RunManifest:
    """Train one stage (cached by config hash) and write checkpoint + manifest."""
    if stage not in STAGES:
        raise ConfigError(f"unknown training stage {stage!r}")
    manifest = new_manifest(f"train-{stage}", cfg)
    sdir = stage_dir(workdir, stage, cfg)
    if stage_is_cached(stage, cfg, workdir) and not force:
        manifest.artifacts.append(_rel(os.path.join(sdir, "checkpoint.idh"), sdir))
        manifest.metrics["cached"] = True
        manifest.timestamps["finished"] = _timestamp()
        manifest.write(os.path.join(sdir, "manifest.json"))
        return manifest

    for dep in _STAGE_DEPS[stage]:
        if not stage_is_cached(dep, cfg, workdir):
            raise MissingStageError(dep)

    seed = int(cfg.get("seed", 0))
    bundle = build_bundle(cfg)
    load_stages(bundle, _STAGE_DEPS[stage], cfg, workdir)
    records = build_corpus(cfg)
    train_records, _ = split_corpus(records, cfg)

    if stage == "parser":
        log = train_parser_stage(bundle, train_records, cfg, seed)
    elif stage == "identity":
        log = train_identity_stage(bundle, train_records, cfg, seed)
    elif stage == "generator":
        log = train_generator_stage(bundle, cfg, seed)
    elif stage == "mapper":
        log = vfgm.train_mapper(bundle, train_records,
                                vfgm.MapperConfig(**cfg["mapper"]), seed=seed)
    else:
        disen_cfg = atm.DisenConfig(**cfg["disennet"])
        virtuals = virtual_batch(bundle, [r.image for r in train_records],
                                 noise_seed=seed)
        log = atm.train_disennet(bundle, train_records, virtuals, disen_cfg, seed=seed)

    path = save_stage(bundle, stage, cfg, workdir, log)
    manifest.artifacts.append(_rel(path, sdir))
    if log.rows:
        manifest.metrics["final_loss"] = log.rows[-1][1]
        manifest.metrics["steps"] = len(log.rows)
    manifest.timestamps["finished"] = _timestamp()
    manifest.write(os.path.join(sdir, "manifest.json"))
    return manifest


def run_all_stages(cfg: dict, workdir, force: bool = False):
    return [run_train(stage, cfg, workdir, force=force) for stage in STAGES]


# ---------------------------------------------------------------------------
# synth / protect / evaluate runs
# ---------------------------------------------------------------------------

def run_synth(cfg: dict, out_dir, n: int | None = None) -> RunManifest:
    manifest = new_manifest("synth", cfg)
    records = build_corpus(cfg)
    if n is not None:
        records = records[:n]
    path = corpus.save_corpus(records, out_dir)
    manifest.artifacts.append(_rel(path, out_dir))
    manifest.metrics["n_records"] = len(records)
    manifest.timestamps["finished"] = _timestamp()
    manifest.write(os.path.join(out_dir, "run_manifest.json"))
    return manifest


def _read_image_record(path, name):
    from PIL import Image as PILImage
    img = np.asarray(PILImage.open(path).convert("RGB"),
                     dtype=np.float32) / np.float32(255.0)
    return corpus.FaceRecord(
        image=img, parsing=np.zeros(img.shape[:2], dtype=np.uint8), identity_id=0,
        attr_params=np.zeros(0, dtype=np.float32), source="external", name=name)


def _load_inputs(input_path, n_cls):
    """Input faces: a manifest corpus, a directory of PNGs, or one image file.

    Returns (records, failures); unreadable files are reported per file rather
    than aborting the whole run.
    """
    records, failures = [], []
    if os.path.isdir(input_path):
        if os.path.exists(os.path.join(input_path, "manifest.json")):
            return corpus.load_corpus(input_path, n_cls=n_cls), []
        names = sorted(f for f in os.listdir(input_path)
                       if f.endswith(".png") and not f.endswith("_parsing.png"))
        for f in names:
            try:
                records.append(_read_image_record(os.path.join(input_path, f), f))
            except OSError as err:
                failures.append({"source": f, "error": str(err)})
        return records, failures
    try:
        records.append(_read_image_record(input_path, os.path.basename(input_path)))
    except OSError as err:
        failures.append({"source": os.path.basename(str(input_path)), "error": str(err)})
    return records, failures


def _save_png(path, image):
    from PIL import Image as PILImage
    import io
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(arr, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def run_protect(cfg: dict, workdir, input_path, out_dir, alpha: float | None = None,
                diverse: int = 0, keep_background: bool = False,
                seed: int | None = None) -> RunManifest:
    """Protect every input face; writes PNGs plus a records.json with id similarities."""
    alpha = cfg["protect"]["alpha"] if alpha is None else float(alpha)
    seed = int(cfg.get("seed", 0)) if seed is None else int(seed)
    bundle = build_bundle(cfg)
    needed = ["generator", "mapper", "identity", "disennet"]
    if keep_background:
        needed.append("parser")
    load_stages(bundle, needed, cfg, workdir)

    manifest = new_manifest("protect", cfg)
    os.makedirs(out_dir, exist_ok=True)
    inputs, failures = _load_inputs(input_path, cfg["corpus"]["n_cls"])
    manifest.inputs = {rec.name: sha256_hex(rec.image.tobytes())[:16] for rec in inputs}
    manifest.inputs["__flags__"] = canonical_json(
        {"alpha": alpha, "diverse": diverse, "keep_background": keep_background,
         "seed": seed})
    records_out = []
    for rec in inputs:
        try:
            stem = os.path.splitext(rec.name)[0] or "face"
            if diverse > 0:
                results = diversity.diverse_protect(bundle, rec.image, diverse, seed=seed,
                                                    alpha=alpha)
            else:
                x_v = vfgm.generate_virtual(bundle.mapper_backbone,
                                            bundle.style_generator, rec.image,
                                            noise_seed=seed)
                results = [atm.protect(bundle, rec.image, x_v, alpha=alpha)]
            for j, res in enumerate(results):
                suffix = f"_d{j}" if diverse > 0 else ""
                out_img = res.protected
                if keep_background:
                    out_img = replace_background(rec.image, res.protected,
                                                 bundle.face_parser)
                fname = f"{stem}_protected{suffix}.png"
                _save_png(os.path.join(out_dir, fname), out_img)
                records_out.append({
                    "source": rec.name, "protected": fname, "alpha": res.alpha,
                    "id_similarity": res.id_similarity,
                    "identity_id": int(rec.identity_id), "run_id": res.run_id,
                })
        except (OSError, ValueError) as err:
            failures.append({"source": rec.name, "error": str(err)})
    atomic_write_text(os.path.join(out_dir, "records.json"),
                      json.dumps(records_out, sort_keys=True, indent=1) + "\n")
    manifest.metrics["n_protected"] = len(records_out)
    manifest.metrics["n_failed"] = len(failures)
    if failures:
        manifest.metrics["failures"] = failures
    manifest.artifacts.append("records.json")
    manifest.timestamps["finished"] = _timestamp()
    manifest.write(os.path.join(out_dir, "run_manifest.json"))
    if not records_out:
        details = "; ".join(f"{f['source']}: {f['error']}" for f in failures)
        raise ConfigError(f"all inputs failed protection ({details or 'no inputs'})")
    return manifest


def _retag_pairs(pairs, domain, a_protected, b_protected):
    return [corpus.VerificationPair(p.a, p.b, p.same_identity, domain=domain,
                                    a_protected=a_protected, b_protected=b_protected)
            for p in pairs]


def _sample_cross_pairs(origs, prots, n_same, n_diff, seed):
    """XDR pairs: one original side, one protected side, no repeats."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 0xCD12]))
    same = [(i, j) for i, o in enumerate(origs) for j, p in enumerate(prots)
            if o.identity_id == p.identity_id]
    diff = [(i, j) for i, o in enumerate(origs) for j, p in enumerate(prots)
            if o.identity_id != p.identity_id]
    if n_same > len(same) or n_diff > len(diff):
        raise corpus.CorpusError(
            f"infeasible pair counts; achievable maxima: n_same={len(same)}, "
            f"n_diff={len(diff)}")
    pairs = []
    for count, pool, flag in ((n_same, same, True), (n_diff, diff, False)):
        if count:
            chosen = rng.choice(len(pool), size=count, replace=False)
            for k in chosen:
                i, j = pool[int(k)]
                pairs.append(corpus.VerificationPair(
                    origs[i], prots[j], flag, domain="XDR",
                    a_protected=False, b_protected=True))
    return pairs


def run_evaluate(cfg: dict, workdir, protected_dir, original_dir, out_dir,
                 domains=("orig", "adr", "xdr")) -> RunManifest:
    """Similarity + parsing reports over matched pairs, ROC per requested domain."""
    from PIL import Image as PILImage
    manifest = new_manifest("evaluate", cfg)
    os.makedirs(out_dir, exist_ok=True)
    n_cls = cfg["corpus"]["n_cls"]
    seed = int(cfg.get("seed", 0))

    originals, _ = _load_inputs(original_dir, n_cls)
    by_name = {r.name: r for r in originals}
    records_path = os.path.join(protected_dir, "records.json")
    prot_entries = []
    if os.path.exists(records_path):
        with open(records_path) as fh:
            for entry in json.load(fh):
                img = np.asarray(
                    PILImage.open(os.path.join(protected_dir, entry["protected"]))
                    .convert("RGB"), dtype=np.float32) / np.float32(255.0)
                prot_entries.append((entry, img))
        pairs = [(by_name[e["source"]].image, img)
                 for e, img in prot_entries if e["source"] in by_name]
        protected_flag = True
    else:
        # bare directory: match by filename, treat as unprotected images
        others, _ = _load_inputs(protected_dir, n_cls)
        pairs = [(by_name[r.name].image, r.image) for r in others if r.name in by_name]
        prot_entries = [({"source": r.name, "identity_id": r.identity_id}, r.image)
                        for r in others]
        protected_flag = False
    if not pairs:
        raise ConfigError("no matched original/protected pairs to evaluate")
    manifest.inputs = {
        "originals": sha256_hex(b"".join(r.image.tobytes() for r in originals))[:16],
        "protected": sha256_hex(b"".join(img.tobytes() for _, img in prot_entries))[:16],
        "__flags__": canonical_json({"domains": list(domains)}),
    }

    sim = metrics.evaluate_similarity(pairs)
    manifest.metrics["similarity"] = sim.to_dict()
    atomic_write_text(os.path.join(out_dir, "similarity.json"),
                      canonical_json(sim.to_dict()) + "\n")

    bundle = build_bundle(cfg)
    load_stage(bundle, "parser", cfg, workdir)
    from .backbones import parse_face
    parse_scores = []
    for a, b in pairs:
        _, seg_a = parse_face(bundle.face_parser, a)
        _, seg_b = parse_face(bundle.face_parser, b)
        parse_scores.append(metrics.parsing_similarity(seg_a, seg_b, n_cls))
    parsing_mean = {key: float(np.mean([getattr(r, key) for r in parse_scores]))
                    for key in ("pa", "mpa", "miou", "fwiou")}
    manifest.metrics["parsing"] = parsing_mean
    atomic_write_text(os.path.join(out_dir, "parsing.json"),
                      canonical_json(parsing_mean) + "\n")

    load_stage(bundle, "identity", cfg, workdir)
    heldout = bundle.heldout_encoder

    def embedder(image):
        from .backbones import embed_identity
        return embed_identity(heldout, image).vec.numpy()

    prot_records = []
    for entry, img in prot_entries:
        src = by_name.get(entry["source"])
        ident = src.identity_id if src is not None else int(entry.get("identity_id", 0))
        prot_records.append(corpus.FaceRecord(
            image=img, parsing=np.zeros(img.shape[:2], dtype=np.uint8),
            identity_id=ident, attr_params=np.zeros(0, dtype=np.float32),
            source="external", name=entry.get("protected", entry["source"])))

    ev = cfg["evaluate"]
    for domain in domains:
        domain = domain.lower()
        if domain == "orig":
            dpairs = corpus.sample_verification_pairs(
                originals, ev["n_same"], ev["n_diff"], seed=seed)
        elif domain == "adr":
            if not protected_flag:
                raise ConfigError("ADR requires protected images on both sides")
            dpairs = _retag_pairs(
                corpus.sample_verification_pairs(prot_records, ev["n_same"],
                                                 ev["n_diff"], seed=seed),
                "ADR", True, True)
        elif domain == "xdr":
            if not protected_flag:
                raise ConfigError("XDR requires protected images on one side")
            dpairs = _sample_cross_pairs(originals, prot_records,
                                         ev["n_same"], ev["n_diff"], seed)
        else:
            raise ConfigError(f"unknown evaluation domain {domain!r}")
        roc = metrics.verification_roc(dpairs, embedder, domain=domain.upper())
        match_rate = metrics.threshold_match_rate(dpairs, embedder, ev["tau"]) \
            if any(p.same_identity for p in dpairs) else None
        manifest.metrics[f"roc_{domain}"] = {"auc": roc.auc, "n_pairs": len(dpairs),
                                             "match_rate": match_rate, "tau": ev["tau"]}
        atomic_write_text(os.path.join(out_dir, f"roc_{domain}.json"),
                          canonical_json({"auc": roc.auc, "domain": roc.domain,
                                          "match_rate": match_rate,
                                          "tau": ev["tau"]}) + "\n")
        atomic_write_text(os.path.join(out_dir, f"roc_{domain}.csv"), roc.to_csv())

    manifest.timestamps["finished"] = _timestamp()
    manifest.write(os.path.join(out_dir, "run_manifest.json"))
    return manifest
