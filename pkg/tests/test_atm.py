import numpy as np
import pytest
import torch

from idhider import atm, pipeline
from idhider.atm import (DisenConfig, ProtectionResult, attribute_loss,
                         blend_pyramids, disen_objective, hinge_d_loss,
                         hinge_g_loss, identity_loss, protect,
                         reconstruction_loss, train_disennet,
                         visual_content_loss)
from idhider.vfgm import NumericError

from conftest import (directional_grad_check, matches_snapshot, small_config,
                      snapshot)


def hinge_d_loop(real_list, fake_list):
    total = 0.0
    for real, fake in zip(real_list, fake_list):
        r = [max(0.0, 1.0 - float(v)) for v in np.asarray(real).ravel()]
        f = [max(0.0, 1.0 + float(v)) for v in np.asarray(fake).ravel()]
        total += sum(r) / len(r) + sum(f) / len(f)
    return total


# --- hinge losses --------------------------------------------------------------

def test_hinge_d_satisfied_margins_are_zero():
    for m in (1, 2, 3):
        real = [torch.ones(2, 3)] * m
        fake = [-torch.ones(2, 3)] * m
        assert hinge_d_loss(real, fake).item() == 0.0


def test_hinge_d_zero_scores_single_scale():
    val = hinge_d_loss([torch.zeros(4, 4)], [torch.zeros(4, 4)])
    assert val.item() == pytest.approx(2.0)


def test_hinge_d_matches_loop_oracle():
    rng = np.random.default_rng(11)
    real = [torch.from_numpy(rng.standard_normal((1, 3, 3)).astype(np.float32))
            for _ in range(3)]
    fake = [torch.from_numpy(rng.standard_normal((1, 3, 3)).astype(np.float32))
            for _ in range(3)]
    assert hinge_d_loss(real, fake).item() == pytest.approx(
        hinge_d_loop(real, fake), abs=1e-6)


def test_hinge_d_scale_mismatch():
    with pytest.raises(ValueError):
        hinge_d_loss([torch.zeros(2)], [torch.zeros(2), torch.zeros(2)])


def test_hinge_g_examples():
    assert hinge_g_loss([torch.zeros(3, 3)]).item() == 0.0
    assert hinge_g_loss([torch.ones(2, 2)]).item() == pytest.approx(-1.0)
    fakes = [torch.full((2,), 0.5), torch.full((4,), -0.25)]
    assert hinge_g_loss(fakes).item() == pytest.approx(-0.25)


# --- identity / attribute / pixel losses ---------------------------------------

def test_identity_loss_endpoints():
    e = torch.tensor([1.0, 0.0, 0.0])
    assert identity_loss(e, e).item() == pytest.approx(0.0, abs=1e-7)
    assert identity_loss(e, torch.tensor([0.0, 1.0, 0.0])).item() == pytest.approx(1.0)
    assert identity_loss(e, -e).item() == pytest.approx(2.0)


def test_attribute_loss_examples_and_oracle():
    lv = torch.zeros(2, 3, 3)
    assert attribute_loss([lv], [lv]).item() == 0.0
    ones = torch.ones(18)
    assert attribute_loss([ones], [torch.zeros(18)]).item() == pytest.approx(9.0)

    rng = np.random.default_rng(12)
    pa = [torch.from_numpy(rng.standard_normal((2, s, s))) for s in (2, 4, 8)]
    pb = [torch.from_numpy(rng.standard_normal((2, s, s))) for s in (2, 4, 8)]
    want = 0.0
    for la, lb in zip(pa, pb):
        for a, b in zip(la.numpy().ravel(), lb.numpy().ravel()):
            want += 0.5 * (float(a) - float(b)) ** 2
    assert attribute_loss(pa, pb).item() == pytest.approx(want, abs=1e-5)


def test_attribute_loss_mismatch_errors():
    with pytest.raises(ValueError, match="depth"):
        attribute_loss([torch.zeros(2)], [torch.zeros(2), torch.zeros(2)])
    with pytest.raises(ValueError, match="shape"):
        attribute_loss([torch.zeros(2, 3)], [torch.zeros(3, 2)])


def test_pixel_losses_examples_and_oracle():
    x = torch.zeros(3, 4, 4)
    assert visual_content_loss(x, x).item() == 0.0
    y = x.clone()
    y[1, 2, 3] = 1.0
    assert visual_content_loss(x, y).item() == pytest.approx(0.5)
    assert reconstruction_loss(x, y).item() == pytest.approx(0.5)

    rng = np.random.default_rng(13)
    a = rng.standard_normal((8, 8, 3)).astype(np.float32)
    b = rng.standard_normal((8, 8, 3)).astype(np.float32)
    want = 0.5 * sum((float(u) - float(v)) ** 2
                     for u, v in zip(a.ravel(), b.ravel()))
    got = visual_content_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
    assert got == pytest.approx(want, abs=1e-5)


# --- objective -----------------------------------------------------------------

def test_disen_objective_paper_weights():
    cfg = DisenConfig()
    assert (cfg.lambda_id, cfg.lambda_attr, cfg.lambda_vs, cfg.lambda_re) == \
        (10.0, 20.0, 10.0, 10.0)
    assert cfg.learning_rate == pytest.approx(4e-4)
    assert cfg.batch_size == 8
    assert (cfg.adam_beta1, cfg.adam_beta2) == (0.0, 0.99)
    one = torch.ones(())
    assert disen_objective(one, one, one, one, one, cfg).item() == pytest.approx(51.0)
    zero_cfg = DisenConfig(lambda_id=0, lambda_attr=0, lambda_vs=0, lambda_re=0)
    assert disen_objective(one, one, one, one, one, zero_cfg).item() == pytest.approx(1.0)
    ablated = DisenConfig(use_vs_loss=False)
    assert disen_objective(one, one, one, one, one, ablated).item() == pytest.approx(41.0)


# --- gradients -------------------------------------------------------------------

def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(14)
    e2 = torch.from_numpy(rng.standard_normal(8).astype(np.float32))
    e1 = torch.from_numpy(rng.standard_normal(8).astype(np.float32))
    assert directional_grad_check(lambda v: identity_loss(v, e2.double()), e1) <= 1e-3

    lb = torch.from_numpy(rng.standard_normal((2, 3, 3)).astype(np.float32))
    la = torch.from_numpy(rng.standard_normal((2, 3, 3)).astype(np.float32))
    assert directional_grad_check(
        lambda v: attribute_loss([v], [lb.double()]), la) <= 1e-3

    yb = torch.from_numpy(rng.standard_normal((3, 5, 5)).astype(np.float32))
    ya = torch.from_numpy(rng.standard_normal((3, 5, 5)).astype(np.float32))
    assert directional_grad_check(
        lambda v: visual_content_loss(v, yb.double()), ya) <= 1e-3

    fake = torch.from_numpy(rng.standard_normal((1, 4, 4)).astype(np.float32))
    real = torch.from_numpy(rng.standard_normal((1, 4, 4)).astype(np.float32))
    assert directional_grad_check(
        lambda v: hinge_d_loss([real.double()], [v]), fake) <= 1e-3
    assert directional_grad_check(lambda v: hinge_g_loss([v]), fake) <= 1e-3


# --- training contract ------------------------------------------------------------

def test_train_zero_steps_keeps_params(fresh_bundle, small_records):
    snaps = {name: snapshot(getattr(fresh_bundle, name))
             for name in ("attribute_encoder", "fusion_generator", "discriminators",
                          "identity_encoder")}
    virtuals = [r.image for r in small_records]
    log = train_disennet(fresh_bundle, small_records, virtuals,
                         DisenConfig(steps=0), seed=0)
    assert log.rows == []
    for name, snap in snaps.items():
        assert matches_snapshot(getattr(fresh_bundle, name), snap)


def _tiny_cfg(steps, **kw):
    base = dict(lambda_id=10.0, lambda_attr=20.0, lambda_vs=1e-3, lambda_re=1e-3,
                learning_rate=1e-3, batch_size=4, steps=steps)
    base.update(kw)
    return DisenConfig(**base)


def test_train_freezes_identity_encoder_and_is_deterministic(small_records):
    results = []
    for _ in range(2):
        bundle = pipeline.build_bundle(small_config(seed=3))
        frozen = snapshot(bundle.identity_encoder)
        virtuals = [r.image for r in small_records]
        log = train_disennet(bundle, small_records, virtuals, _tiny_cfg(4), seed=9)
        assert matches_snapshot(bundle.identity_encoder, frozen)
        results.append((log.rows, snapshot(bundle.fusion_generator)))
    assert results[0][0] == results[1][0]
    assert all(torch.equal(results[0][1][k], results[1][1][k]) for k in results[0][1])


def test_train_smoothed_id_and_attr_losses_decrease(small_records):
    bundle = pipeline.build_bundle(small_config(seed=4))
    virtuals = [r.image for r in small_records]
    log = train_disennet(bundle, small_records, virtuals, _tiny_cfg(120), seed=2)
    for name in ("id", "attr"):
        smooth = log.smoothed(name, window=30)
        assert smooth[-1] < smooth[29]


def test_train_aborts_on_nonfinite(fresh_bundle, small_records):
    virtuals = [r.image for r in small_records]
    with pytest.raises(NumericError, match="step"):
        train_disennet(fresh_bundle, small_records, virtuals,
                       _tiny_cfg(2, lambda_attr=1e39), seed=0)


# --- protection ----------------------------------------------------------------

def test_protect_alpha_grid_and_metadata(small_bundle, small_records):
    x_i = small_records[0].image
    x_v = small_records[1].image
    for alpha in (0.1, 0.3, 0.5, 0.7, 0.9):
        res = protect(small_bundle, x_i, x_v, alpha=alpha)
        assert isinstance(res, ProtectionResult)
        assert res.alpha == pytest.approx(alpha)
        assert -1.0 <= res.id_similarity <= 1.0
        assert res.protected.shape == x_i.shape


def test_protect_is_deterministic(small_bundle, small_records):
    a = protect(small_bundle, small_records[0].image, small_records[1].image, 0.4)
    b = protect(small_bundle, small_records[0].image, small_records[1].image, 0.4)
    assert np.array_equal(a.protected, b.protected)
    assert a.run_id == b.run_id


def test_protect_validates_inputs(small_bundle, small_records):
    with pytest.raises(ValueError, match="alpha"):
        protect(small_bundle, small_records[0].image, small_records[1].image, 1.5)
    small = np.zeros((16, 16, 3), dtype=np.float32)
    with pytest.raises(ValueError, match="dims"):
        protect(small_bundle, small_records[0].image, small, 0.5)


def test_blend_endpoint_and_linearity(small_bundle, small_records):
    from idhider.backbones import encode_attributes
    pyr_i = encode_attributes(small_bundle.attribute_encoder, small_records[0].image)
    pyr_v = encode_attributes(small_bundle.attribute_encoder, small_records[1].image)
    at_one = blend_pyramids(pyr_v, pyr_i, 1.0)
    for blended, orig in zip(at_one.levels, pyr_v.levels):
        assert torch.equal(blended, orig)
    at_zero = blend_pyramids(pyr_v, pyr_i, 0.0)
    for blended, orig in zip(at_zero.levels, pyr_i.levels):
        assert torch.equal(blended, orig)
    alpha = 0.35
    mid = blend_pyramids(pyr_v, pyr_i, alpha)
    for b, lo, hi in zip(mid.levels, at_zero.levels, at_one.levels):
        assert torch.allclose(b - lo, alpha * (hi - lo), atol=1e-6)
