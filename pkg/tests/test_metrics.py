import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idhider import corpus, metrics
from idhider.metrics import (RandomFeatureNet, evaluate_similarity, mae,
                             parsing_similarity, pair_scores, perceptual_distance,
                             rmse, roc_from_scores, ssim, threshold_match_rate,
                             verification_roc)


def _img(rng, h=8, w=8):
    return rng.random((h, w, 3)).astype(np.float32)


# --- mae / rmse -----------------------------------------------------------------

def test_mae_rmse_identical_zero():
    rng = np.random.default_rng(0)
    a = _img(rng)
    assert mae(a, a) == 0.0
    assert rmse(a, a) == 0.0


def test_mae_rmse_constant_offset():
    a = np.full((6, 6, 3), 0.2, dtype=np.float32)
    b = np.full((6, 6, 3), 0.7, dtype=np.float32)
    assert mae(a, b) == pytest.approx(0.5, abs=1e-7)
    assert rmse(a, b) == pytest.approx(0.5, abs=1e-7)


def test_mae_rmse_match_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = _img(rng), _img(rng)
    diffs = [abs(float(x) - float(y)) for x, y in zip(a.ravel(), b.ravel())]
    want_mae = sum(diffs) / len(diffs)
    want_rmse = math.sqrt(sum(d * d for d in diffs) / len(diffs))
    assert mae(a, b) == pytest.approx(want_mae, abs=1e-7)
    assert rmse(a, b) == pytest.approx(want_rmse, abs=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_pixel_metrics_symmetric_nonnegative_power_mean(seed):
    rng = np.random.default_rng(seed)
    a, b = _img(rng), _img(rng)
    assert mae(a, b) == pytest.approx(mae(b, a), abs=1e-12)
    assert rmse(a, b) == pytest.approx(rmse(b, a), abs=1e-12)
    assert mae(a, b) >= 0.0
    assert rmse(a, b) >= mae(a, b) - 1e-12


# --- ssim ------------------------------------------------------------------------

def test_ssim_self_is_one():
    rng = np.random.default_rng(2)
    img = rng.random((32, 32, 3)).astype(np.float32)
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-6)


def test_ssim_symmetric():
    rng = np.random.default_rng(3)
    a = rng.random((24, 24, 3)).astype(np.float32)
    b = rng.random((24, 24, 3)).astype(np.float32)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)


def test_ssim_constant_images_closed_form():
    mu1, mu2 = 0.2, 0.8
    a = np.full((16, 16, 3), mu1, dtype=np.float32)
    b = np.full((16, 16, 3), mu2, dtype=np.float32)
    c1 = (0.01 * 1.0) ** 2
    want = (2 * mu1 * mu2 + c1) / (mu1 ** 2 + mu2 ** 2 + c1)
    assert ssim(a, b) == pytest.approx(want, abs=1e-6)


def test_ssim_small_images_fall_back_to_smaller_window():
    rng = np.random.default_rng(4)
    a = rng.random((7, 7, 3)).astype(np.float32)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-6)


# --- perceptual proxy --------------------------------------------------------------

def test_perceptual_identity_symmetry_positivity():
    rng = np.random.default_rng(5)
    net = RandomFeatureNet(seed=7)
    x = rng.random((16, 16, 3)).astype(np.float32)
    assert perceptual_distance(x, x, net) == 0.0
    for _ in range(100):
        a, b = rng.random((16, 16, 3)).astype(np.float32), \
            rng.random((16, 16, 3)).astype(np.float32)
        d_ab = perceptual_distance(a, b, net)
        assert d_ab > 0.0
        assert d_ab == pytest.approx(perceptual_distance(b, a, net), abs=1e-9)


def test_perceptual_net_is_seed_deterministic():
    rng = np.random.default_rng(6)
    a, b = _img(rng, 16, 16), _img(rng, 16, 16)
    d1 = perceptual_distance(a, b, RandomFeatureNet(seed=3))
    d2 = perceptual_distance(a, b, RandomFeatureNet(seed=3))
    d3 = perceptual_distance(a, b, RandomFeatureNet(seed=4))
    assert d1 == d2
    assert d1 != d3


# --- parsing similarity ---------------------------------------------------------------

def test_parsing_identical_maps_all_ones():
    rng = np.random.default_rng(7)
    seg = rng.integers(0, 5, (16, 16)).astype(np.uint8)
    rep = parsing_similarity(seg, seg, 5)
    assert (rep.pa, rep.mpa, rep.miou, rep.fwiou) == (1.0, 1.0, 1.0, 1.0)


def test_parsing_disjoint_single_classes():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.ones((8, 8), dtype=np.uint8)
    rep = parsing_similarity(a, b, 2)
    assert rep.pa == 0.0 and rep.miou == 0.0


def test_parsing_two_by_two_hand_case():
    a = np.array([[0, 0], [1, 1]], dtype=np.uint8)
    b = np.array([[0, 1], [1, 1]], dtype=np.uint8)
    rep = parsing_similarity(a, b, 2)
    assert rep.pa == pytest.approx(0.75, abs=1e-9)
    assert rep.mpa == pytest.approx((0.5 + 1.0) / 2, abs=1e-9)
    assert rep.miou == pytest.approx(7 / 12, abs=1e-9)
    assert rep.fwiou == pytest.approx(0.5 * 0.5 + 0.5 * (2 / 3), abs=1e-9)


def test_parsing_rejects_out_of_range():
    a = np.zeros((4, 4), dtype=np.uint8)
    b = np.full((4, 4), 3, dtype=np.uint8)
    with pytest.raises(ValueError):
        parsing_similarity(a, b, 3)


def test_parsing_scores_in_unit_interval():
    rng = np.random.default_rng(8)
    a = rng.integers(0, 4, (12, 12)).astype(np.uint8)
    b = rng.integers(0, 4, (12, 12)).astype(np.uint8)
    rep = parsing_similarity(a, b, 4)
    for v in (rep.pa, rep.mpa, rep.miou, rep.fwiou):
        assert 0.0 <= v <= 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_pa_and_fwiou_hit_one_only_on_identical_maps(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 3, (6, 6)).astype(np.uint8)
    b = a.copy()
    if rng.random() < 0.7:
        i, j = rng.integers(0, 6, 2)
        b[i, j] = (b[i, j] + 1) % 3
    rep = parsing_similarity(a, b, 3)
    if np.array_equal(a, b):
        assert rep.pa == 1.0 and rep.fwiou == 1.0
    else:
        assert rep.pa < 1.0 and rep.fwiou < 1.0


# --- verification ----------------------------------------------------------------------

def test_roc_perfectly_separated_is_one():
    scores = np.array([0.9] * 50 + [0.1] * 50)
    labels = np.array([True] * 50 + [False] * 50)
    assert roc_from_scores(scores, labels).auc == pytest.approx(1.0)


def test_roc_permuted_labels_near_half():
    rng = np.random.default_rng(9)
    scores = rng.normal(size=2000)
    labels = np.array([True] * 1000 + [False] * 1000)
    rng.shuffle(labels)
    auc = roc_from_scores(scores, labels).auc
    assert 0.45 <= auc <= 0.55


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_auc_invariant_under_increasing_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=60)
    labels = rng.random(60) < 0.5
    if labels.all() or not labels.any():
        labels[0] = True
        labels[1] = False
    base = roc_from_scores(scores, labels).auc
    for transform in (lambda s: 2.0 * s + 3.0, np.tanh, lambda s: s ** 3):
        assert roc_from_scores(transform(scores), labels).auc == pytest.approx(base)


class _VecEmbedder:
    """Maps each record image to a prescribed vector (keyed by image bytes)."""

    def __init__(self):
        self.table = {}

    def add(self, rec, vec):
        self.table[rec.image.tobytes()] = np.asarray(vec, dtype=np.float64)

    def __call__(self, image):
        return self.table[image.tobytes()]


def _pair_fixture(score_list):
    emb = _VecEmbedder()
    pairs = []
    for k, s in enumerate(score_list):
        a = corpus.generate_synthetic_face(2 * k, np.full(8, 0.5), size=32)
        b = corpus.generate_synthetic_face(2 * k + 1, np.full(8, 0.5), size=32)
        theta = math.acos(s)
        emb.add(a, [1.0, 0.0])
        emb.add(b, [math.cos(theta), math.sin(theta)])
        pairs.append(corpus.VerificationPair(a, b, True))
    return pairs, emb


def test_threshold_match_rate_hand_case():
    pairs, emb = _pair_fixture([0.9, 0.8, 0.5, 0.2])
    scores, _ = pair_scores(pairs, emb)
    assert np.allclose(sorted(scores, reverse=True), [0.9, 0.8, 0.5, 0.2], atol=1e-9)
    assert threshold_match_rate(pairs, emb, 0.74) == pytest.approx(0.5)
    assert threshold_match_rate(pairs, emb, -1.0) == pytest.approx(1.0)
    assert threshold_match_rate(pairs, emb, 1.0001) == pytest.approx(0.0)


def test_verification_roc_uses_cosine_scores():
    pairs, emb = _pair_fixture([0.95, 0.9])
    neg_a = corpus.generate_synthetic_face(100, np.full(8, 0.5), size=32)
    neg_b = corpus.generate_synthetic_face(101, np.full(8, 0.5), size=32)
    emb.add(neg_a, [1.0, 0.0])
    emb.add(neg_b, [0.0, 1.0])
    pairs.append(corpus.VerificationPair(neg_a, neg_b, False))
    rep = verification_roc(pairs, emb, domain="ORIG")
    assert rep.auc == pytest.approx(1.0)
    assert rep.domain == "ORIG"


# --- batch similarity -------------------------------------------------------------------

def test_evaluate_similarity_report():
    rng = np.random.default_rng(10)
    pairs = [(_img(rng, 16, 16), _img(rng, 16, 16)) for _ in range(5)]
    rep = evaluate_similarity(pairs, RandomFeatureNet(seed=1))
    assert rep.n_pairs == 5
    assert -1.0 <= rep.ssim <= 1.0
    assert rep.mae >= 0.0 and rep.rmse >= 0.0
    assert rep.lpips_proxy > 0.0
    assert set(rep.to_dict()) == {"lpips_proxy", "ssim", "mae", "rmse", "n_pairs"}


def test_evaluate_similarity_identical_dir_values():
    rng = np.random.default_rng(11)
    img = _img(rng, 16, 16)
    rep = evaluate_similarity([(img, img.copy())], RandomFeatureNet(seed=1))
    assert rep.ssim == pytest.approx(1.0, abs=1e-6)
    assert rep.mae == 0.0 and rep.rmse == 0.0 and rep.lpips_proxy == 0.0
