"""Tests for the ranking, consistency, action, and saliency objectives."""

import numpy as np
import pytest

from dualstream import losses, numcore as nc
from dualstream.errors import FormatError, SampleError
from dualstream.losses import (KeypointFeatures, LossConfig, action_loss,
                               bilinear_sample, cgc_loss, discrete_ap,
                               kl_saliency, negative_set, smooth_ap,
                               total_loss)
from dualstream.numcore import Tensor


def _random_kf(rng, m=6, n=3, c=8, spread=1.0):
    feats = [Tensor(rng.standard_normal((m, c)), requires_grad=True)
             for _ in range(n)]
    pts = rng.uniform(0, spread, size=(m, 3))
    return KeypointFeatures(features=feats, world_points=pts)


def test_smooth_ap_two_point_closed_form():
    # hand-computed: one query with one negative at similarity margin d
    cfg = LossConfig(tau=0.5, zeta=0.01, normalize_features=False)
    f_p = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    f_q = Tensor(np.array([[1.0, 0.0], [0.5, 0.0]]))
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    kf = KeypointFeatures(features=[f_p, f_q], world_points=pts)
    ap = smooth_ap(0, 1, kf, cfg).item()
    # query 0: pos sim 1.0, negative sim 0.5 -> d = -0.5, G = sigma(-1)
    g0 = 1.0 / (1.0 + np.exp(1.0))
    ap0 = 1.5 / (1.5 + g0)
    # query 1: pos sim 0.0, negative sim 0.0 -> d = 0, G = 0.5
    ap1 = 1.5 / (1.5 + 0.5)
    np.testing.assert_allclose(ap, 0.5 * (ap0 + ap1), rtol=1e-12)


def test_smooth_ap_perfect_ranking_saturates_to_one():
    cfg = LossConfig(tau=0.001, zeta=0.01, normalize_features=False)
    f = Tensor(np.eye(4) * 5.0)
    pts = np.eye(4, 3) * 2.0 + np.arange(4)[:, None]
    kf = KeypointFeatures(features=[f, f], world_points=pts)
    ap = smooth_ap(0, 1, kf, cfg).item()
    np.testing.assert_allclose(ap, 1.0, atol=1e-9)


def test_smooth_ap_approaches_discrete_at_small_tau():
    rng = np.random.default_rng(30)
    cfg = LossConfig(tau=1e-4, zeta=0.3)
    for _ in range(20):
        m = int(rng.integers(3, 8))
        feats = [rng.standard_normal((m, 6)) for _ in range(2)]
        pts = rng.uniform(0, 1, size=(m, 3))
        kf = KeypointFeatures(
            features=[Tensor(f) for f in feats], world_points=pts)
        smooth = smooth_ap(0, 1, kf, cfg).item()
        hard = discrete_ap(0, 1, feats, pts, cfg.zeta)
        assert abs(smooth - hard) < 1e-3


def test_negative_set_respects_zeta_ball():
    pts = np.array([[0.0, 0.0, 0.0],
                    [0.05, 0.0, 0.0],
                    [0.2, 0.0, 0.0],
                    [0.0, 0.3, 0.0]])
    negs = list(negative_set(0, pts, zeta=0.1))
    assert negs == [2, 3]


def test_cgc_loss_closes_the_view_loop():
    rng = np.random.default_rng(31)
    cfg = LossConfig(tau=0.05, zeta=0.2)
    kf = _random_kf(rng, m=5, n=3)
    loss = cgc_loss(kf, cfg).item()
    aps = [smooth_ap(p, (p + 1) % 3, kf, cfg).item() for p in range(3)]
    np.testing.assert_allclose(loss, 1.0 - np.mean(aps), rtol=1e-12)
    assert 0.0 <= loss <= 1.0


def test_cgc_rejects_single_view():
    rng = np.random.default_rng(32)
    kf = _random_kf(rng, n=1)
    with pytest.raises(FormatError):
        cgc_loss(kf, LossConfig())


def test_cgc_gradient_matches_finite_differences():
    rng = np.random.default_rng(33)
    cfg = LossConfig(tau=0.1, zeta=0.2)
    pts = rng.uniform(0, 1, size=(5, 3))

    def f(ts):
        kf = KeypointFeatures(features=list(ts), world_points=pts)
        return cgc_loss(kf, cfg)

    inputs = [Tensor(rng.standard_normal((5, 8)), requires_grad=True)
              for _ in range(3)]
    report = nc.grad_check(f, inputs)
    assert report["passed"], report


def test_descending_cgc_aligns_matched_features():
    # anneal the temperature: a soft phase aligns matched features, a sharp
    # phase then drives the ranking loss itself toward zero
    rng = np.random.default_rng(34)
    coarse = LossConfig(tau=0.3, zeta=0.15)
    fine = LossConfig(tau=0.05, zeta=0.15)
    pts = rng.uniform(0, 1, size=(8, 3))
    feats = [Tensor(rng.standard_normal((8, 8)), requires_grad=True)
             for _ in range(3)]
    start = cgc_loss(KeypointFeatures(features=feats, world_points=pts),
                     fine).item()
    for step in range(200):
        cfg, lr = (coarse, 20.0) if step < 120 else (fine, 5.0)
        for t in feats:
            t.zero_grad()
        loss = cgc_loss(KeypointFeatures(features=feats, world_points=pts), cfg)
        loss.backward()
        for t in feats:
            t.data -= lr * t.grad
    end = cgc_loss(KeypointFeatures(features=feats, world_points=pts),
                   fine).item()
    assert end < start
    assert end < 0.02
    normed = [t.data / np.linalg.norm(t.data, axis=1, keepdims=True)
              for t in feats]
    cos = np.mean([(normed[p] * normed[(p + 1) % 3]).sum(axis=1).mean()
                   for p in range(3)])
    assert cos > 0.99


def test_action_loss_sums_component_cross_entropies():
    rng = np.random.default_rng(35)
    hm = [Tensor(rng.standard_normal(16)), None]
    rot = [Tensor(rng.standard_normal(8)) for _ in range(3)]
    grip = Tensor(rng.standard_normal(2))
    coll = Tensor(rng.standard_normal(2))
    preds = {"heatmaps": hm, "rotation": rot, "gripper": grip, "collision": coll}
    targets = {"heatmaps": [3, None], "rotation": [1, 2, 7],
               "gripper": 0, "collision": 1}
    got = action_loss(preds, targets).item()
    want = nc.softmax_cross_entropy(hm[0], 3).item()
    for t, lg in zip([1, 2, 7], rot):
        want += nc.softmax_cross_entropy(lg, t).item()
    want += nc.softmax_cross_entropy(grip, 0).item()
    want += nc.softmax_cross_entropy(coll, 1).item()
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_action_loss_rejects_out_of_range_target():
    preds = {"rotation": [Tensor(np.zeros(4))], "gripper": Tensor(np.zeros(2)),
             "collision": Tensor(np.zeros(2))}
    targets = {"rotation": [9], "gripper": 0, "collision": 0}
    with pytest.raises(FormatError):
        action_loss(preds, targets)


def test_kl_saliency_zero_iff_equal():
    rng = np.random.default_rng(36)
    t = rng.uniform(0.1, 1.0, size=(8, 8))
    t /= t.sum()
    zero = kl_saliency(Tensor(t.copy()), t).item()
    np.testing.assert_allclose(zero, 0.0, atol=1e-12)
    other = rng.uniform(0.1, 1.0, size=(8, 8))
    other /= other.sum()
    assert kl_saliency(Tensor(other), t).item() > 0.0


def test_kl_saliency_matches_definition():
    rng = np.random.default_rng(37)
    p = rng.uniform(0.1, 1.0, size=(4, 4))
    p /= p.sum()
    t = rng.uniform(0.1, 1.0, size=(4, 4))
    t /= t.sum()
    got = kl_saliency(Tensor(p), t).item()
    want = float((t * (np.log(t) - np.log(p))).sum())
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_kl_saliency_requires_normalized_inputs():
    t = np.full((2, 2), 0.25)
    with pytest.raises(FormatError):
        kl_saliency(Tensor(t * 2.0), t)
    with pytest.raises(FormatError):
        kl_saliency(Tensor(t), t * 2.0)


def test_total_loss_weighting():
    cfg = LossConfig(lam=0.5)
    a, c = Tensor(np.array(2.0)), Tensor(np.array(0.4))
    np.testing.assert_allclose(total_loss(a, c, cfg).item(), 2.2, rtol=1e-12)
    cfg0 = LossConfig(lam=0.0)
    np.testing.assert_allclose(total_loss(a, c, cfg0).item(), 2.0, rtol=1e-12)


def test_bilinear_sample_interpolates_and_backprops():
    fm = Tensor(np.arange(12, dtype=np.float64).reshape(1, 3, 4),
                requires_grad=True)
    out = bilinear_sample(fm, np.array([[1.5, 0.5]]))
    # value between rows 0/1 and cols 1/2: mean of 1, 2, 5, 6
    np.testing.assert_allclose(out.data, [[3.5]])
    out.sum().backward()
    np.testing.assert_allclose(fm.grad[0, :2, 1:3], np.full((2, 2), 0.25))
    np.testing.assert_allclose(fm.grad.sum(), 1.0)


def test_bilinear_sample_rejects_out_of_bounds():
    fm = Tensor(np.zeros((1, 3, 3)))
    with pytest.raises(SampleError):
        bilinear_sample(fm, np.array([[3.01, 0.0]]))


def test_loss_config_validation():
    with pytest.raises(FormatError):
        LossConfig(tau=0.0)
    with pytest.raises(FormatError):
        LossConfig(zeta=-0.1)
