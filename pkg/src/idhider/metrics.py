"""Quantitative evaluation: image similarity, parsing-map similarity, verification ROC.

The perceptual distance uses a fixed, seeded, randomly initialized feature stack
(pretrained perceptual weights are out of reach here); report fields call it
"lpips_proxy" so its values are never mistaken for published LPIPS numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .util import to_tensor


@dataclass
class SimilarityReport:
    lpips_proxy: float
    ssim: float
    mae: float
    rmse: float
    n_pairs: int

    def to_dict(self):
        return {"lpips_proxy": self.lpips_proxy, "ssim": self.ssim,
                "mae": self.mae, "rmse": self.rmse, "n_pairs": self.n_pairs}


@dataclass
class ParsingReport:
    pa: float
    mpa: float
    miou: float
    fwiou: float

    def to_dict(self):
        return {"pa": self.pa, "mpa": self.mpa, "miou": self.miou, "fwiou": self.fwiou}


@dataclass
class RocReport:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float
    domain: str = "ORIG"

    def to_dict(self):
        return {"domain": self.domain, "auc": self.auc,
                "thresholds": self.thresholds.tolist(),
                "tpr": self.tpr.tolist(), "fpr": self.fpr.tolist()}

    def to_csv(self) -> str:
        lines = ["threshold,fpr,tpr"]
        for t, f_, tp in zip(self.thresholds, self.fpr, self.tpr):
            lines.append(f"{t!r},{f_!r},{tp!r}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# pixel metrics
# ---------------------------------------------------------------------------

def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def mae(a: np.ndarray, b: np.ndarray) -> float:
    _check_same_shape(a, b)
    return float(np.mean(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    _check_same_shape(a, b)
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.sqrt(np.mean(d * d)))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _windowed(channel: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode weighted window means via sliding windows."""
    from numpy.lib.stride_tricks import sliding_window_view
    win = sliding_window_view(channel, kernel.shape)
    return np.einsum("ijkl,kl->ij", win, kernel)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean local SSIM with a Gaussian window, averaged over channels.

    Windows shrink (odd size, scaled sigma) when the image is smaller than 11px.
    """
    _check_same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[:2]
    win = min(window, h, w)
    if win % 2 == 0:
        win -= 1
    kernel = _gaussian_kernel(win, sigma * win / window)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x = a[..., ch].astype(np.float64)
        y = b[..., ch].astype(np.float64)
        mu_x = _windowed(x, kernel)
        mu_y = _windowed(y, kernel)
        xx = _windowed(x * x, kernel) - mu_x * mu_x
        yy = _windowed(y * y, kernel) - mu_y * mu_y
        xy = _windowed(x * y, kernel) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# perceptual distance proxy
# ---------------------------------------------------------------------------

class RandomFeatureNet(nn.Module):
    """Frozen conv stack with seeded random weights; a stand-in perceptual net."""

    def __init__(self, seed: int = 2024, channels=(8, 16, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        layers = []
        c_in = 3
        for c_out in channels:
            conv = nn.Conv2d(c_in, c_out, 3, 2, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (2.0 / conv.weight[0].numel()) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = torch.tanh(conv(h))
            feats.append(h)
        return feats


_default_net = None


def default_feature_net() -> RandomFeatureNet:
    global _default_net
    if _default_net is None:
        _default_net = RandomFeatureNet()
    return _default_net


def perceptual_distance(a: np.ndarray, b: np.ndarray,
                        feature_net: RandomFeatureNet | None = None) -> float:
    """Mean over layers of unit-normalized feature-map L2 distance."""
    _check_same_shape(a, b)
    net = feature_net if feature_net is not None else default_feature_net()
    with torch.no_grad():
        fa = net(to_tensor(a)[None])
        fb = net(to_tensor(b)[None])
        dists = []
        for la, lb in zip(fa, fb):
            na = F.normalize(la, dim=1, eps=1e-8)
            nb = F.normalize(lb, dim=1, eps=1e-8)
            dists.append(((na - nb) ** 2).sum(dim=1).mean())
        return float(torch.stack(dists).mean())


# ---------------------------------------------------------------------------
# parsing-map similarity
# ---------------------------------------------------------------------------

def confusion_matrix(reference: np.ndarray, predicted: np.ndarray, n_cls: int) -> np.ndarray:
    if reference.shape != predicted.shape:
        raise ValueError("parsing maps must share dims")
    ref = reference.astype(np.int64).ravel()
    pred = predicted.astype(np.int64).ravel()
    for name, arr in (("reference", ref), ("predicted", pred)):
        if arr.min() < 0 or arr.max() >= n_cls:
            raise ValueError(f"{name} map has classes outside [0, {n_cls})")
    idx = n_cls * ref + pred
    return np.bincount(idx, minlength=n_cls * n_cls).reshape(n_cls, n_cls)


def parsing_similarity(map_a: np.ndarray, map_b: np.ndarray, n_cls: int) -> ParsingReport:
    """PA/MPA/MIoU/FWIoU with map_a as the reference; absent classes are skipped."""
    cm = confusion_matrix(map_a, map_b, n_cls).astype(np.float64)
    total = cm.sum()
    diag = np.diag(cm)
    row = cm.sum(axis=1)      # reference counts
    col = cm.sum(axis=0)      # predicted counts
    pa = diag.sum() / total

    ref_present = row > 0
    mpa = float(np.mean(diag[ref_present] / row[ref_present]))

    union = row + col - diag
    either = union > 0
    iou = np.zeros(n_cls)
    iou[either] = diag[either] / union[either]
    miou = float(np.mean(iou[either]))
    # summed as (row * iou) / total so identical maps give exactly 1.0
    fwiou = float(np.sum(row * iou) / total)
    return ParsingReport(pa=float(pa), mpa=mpa, miou=miou, fwiou=fwiou)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = np.linalg.norm(u) + 1e-12
    nv = np.linalg.norm(v) + 1e-12
    return float(np.dot(u, v) / (nu * nv))


def pair_scores(pairs, embedder):
    """Cosine scores per pair; embeddings cached per record object."""
    cache = {}

    def embed(rec):
        key = id(rec)
        if key not in cache:
            cache[key] = np.asarray(embedder(rec.image), dtype=np.float64)
        return cache[key]

    scores = np.array([_cosine(embed(p.a), embed(p.b)) for p in pairs], dtype=np.float64)
    labels = np.array([p.same_identity for p in pairs], dtype=bool)
    return scores, labels


def roc_from_scores(scores: np.ndarray, labels: np.ndarray, domain: str = "ORIG") -> RocReport:
    """Threshold sweep over observed scores; AUC by the trapezoid rule."""
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    n_pos = max(int(labels.sum()), 1)
    n_neg = max(int((~labels).sum()), 1)
    tp = np.concatenate([[0], np.cumsum(sorted_labels)])
    fp = np.concatenate([[0], np.cumsum(~sorted_labels)])
    tpr = tp / n_pos
    fpr = fp / n_neg
    thresholds = np.concatenate([[np.inf], scores[order]])
    auc = float(np.trapezoid(tpr, fpr))
    return RocReport(thresholds=thresholds, tpr=tpr, fpr=fpr, auc=auc, domain=domain)


def verification_roc(pairs, embedder, domain: str = "ORIG") -> RocReport:
    scores, labels = pair_scores(pairs, embedder)
    return roc_from_scores(scores, labels, domain=domain)


def threshold_match_rate(pairs, embedder, tau: float) -> float:
    """Fraction of same-identity pairs whose cosine score reaches tau."""
    scores, labels = pair_scores(pairs, embedder)
    if not labels.any():
        raise ValueError("no same-identity pairs to rate")
    return float(np.mean(scores[labels] >= tau))


# ---------------------------------------------------------------------------
# batch similarity evaluation
# ---------------------------------------------------------------------------

def evaluate_similarity(image_pairs, feature_net: RandomFeatureNet | None = None) -> SimilarityReport:
    """Mean similarity metrics over (a, b) image pairs.

    Asserts the per-pair power-mean inequality rmse >= mae as a self-check.
    """
    vals = {"lpips_proxy": [], "ssim": [], "mae": [], "rmse": []}
    n = 0
    for a, b in image_pairs:
        m, r = mae(a, b), rmse(a, b)
        if r < m - 1e-12:
            raise AssertionError(f"power-mean violation: rmse {r} < mae {m}")
        vals["mae"].append(m)
        vals["rmse"].append(r)
        vals["ssim"].append(ssim(a, b))
        vals["lpips_proxy"].append(perceptual_distance(a, b, feature_net))
        n += 1
    if n == 0:
        raise ValueError("no image pairs to evaluate")
    return SimilarityReport(
        lpips_proxy=float(np.mean(vals["lpips_proxy"])),
        ssim=float(np.mean(vals["ssim"])),
        mae=float(np.mean(vals["mae"])),
        rmse=float(np.mean(vals["rmse"])),
        n_pairs=n)
