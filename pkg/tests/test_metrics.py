import numpy as np
import pytest

from mdmbench import metrics
from mdmbench.rng import make_rng


def test_depth_metrics_perfect_prediction():
    gt = np.array([[1.0, 2.0], [3.0, 4.0]])
    rep = metrics.depth_metrics(gt.copy(), gt)
    assert rep.rmse == 0 and rep.mae == 0 and rep.rel == 0
    assert rep.delta1 == 1.0
    assert rep.valid_count == 4


def test_depth_metrics_delta1_threshold_boundary():
    gt = np.full((4, 4), 2.0)
    rep = metrics.depth_metrics(1.25001 * gt, gt)
    assert rep.delta1 == 0.0
    rep = metrics.depth_metrics(1.24999 * gt, gt)
    assert rep.delta1 == 1.0


def test_depth_metrics_hand_case():
    pred = np.array([[1.0, 2.0, 4.0]])
    gt = np.array([[1.0, 2.0, 2.0]])
    rep = metrics.depth_metrics(pred, gt)
    assert rep.rmse == pytest.approx(np.sqrt(4 / 3))
    assert rep.mae == pytest.approx(2 / 3)
    assert rep.rel == pytest.approx(1 / 3)
    assert rep.delta1 == pytest.approx(2 / 3)


def test_depth_metrics_joint_validity():
    pred = np.array([[0.0, 2.0, 3.0]])
    gt = np.array([[1.0, 0.0, 3.0]])
    rep = metrics.depth_metrics(pred, gt)
    assert rep.valid_count == 1
    assert rep.rmse == 0.0


def test_depth_metrics_no_joint_valid_raises():
    with pytest.raises(ValueError):
        metrics.depth_metrics(np.zeros((2, 2)), np.ones((2, 2)))


def test_disparity_metrics_perfect():
    gt = np.full((3, 3), 5.0)
    assert metrics.disparity_metrics(gt.copy(), gt) == (0.0, 0.0)


def test_disparity_metrics_strict_threshold_boundary():
    gt = np.full((4, 4), 5.0)
    epe, bp = metrics.disparity_metrics(gt + 1.0, gt, threshold=1.0)
    assert epe == pytest.approx(1.0)
    assert bp == 0.0  # strictly larger than, so exactly 1.0 px is not bad
    _, bp = metrics.disparity_metrics(gt + 1.0001, gt, threshold=1.0)
    assert bp == 1.0


def test_disparity_metrics_hand_case():
    pred = np.array([[2.0, 5.0]])
    gt = np.array([[2.0, 2.0]])
    epe, bp = metrics.disparity_metrics(pred, gt)
    assert epe == pytest.approx(1.5)
    assert bp == pytest.approx(0.5)


def test_align_none_identity():
    rng = make_rng(0)
    pred = rng.uniform(0.5, 5.0, (8, 8))
    assert np.array_equal(metrics.align(pred, pred, "none"), pred)


def test_align_affine_exact_recovery():
    rng = make_rng(1)
    gt = rng.uniform(0.5, 5.0, (16, 16))
    pred = 2.0 * gt + 1.0
    aligned = metrics.align(pred, gt, "affine")
    assert np.allclose(aligned, gt, atol=1e-9)
    assert metrics.depth_metrics(aligned, gt).rel == pytest.approx(0.0, abs=1e-12)


def test_align_scale_closed_form():
    rng = make_rng(2)
    gt = rng.uniform(0.5, 5.0, (16, 16))
    pred = 3.0 * gt
    aligned = metrics.align(pred, gt, "scale")
    assert np.allclose(aligned, gt, atol=1e-12)


def test_align_scale_residual_orthogonal_to_pred():
    rng = make_rng(3)
    gt = rng.uniform(0.5, 5.0, (20, 20))
    pred = gt * rng.uniform(0.8, 1.2, gt.shape) + 0.3
    aligned = metrics.align(pred, gt, "scale")
    s = aligned[pred > 0] / pred[pred > 0]
    resid = float((pred * (s.mean() * pred - gt)).sum())
    assert abs(resid) < 1e-9 * (pred**2).sum()


def test_align_affine_invariance_property():
    rng = make_rng(4)
    gt = rng.uniform(0.5, 5.0, (24, 24))
    pred = gt + rng.normal(0, 0.2, gt.shape)
    pred = np.clip(pred, 0.1, None)
    base = metrics.depth_metrics(metrics.align(pred, gt, "affine"), gt)
    for a, b in ((2.0, 0.5), (0.3, 1.7), (11.0, 0.0)):
        rep = metrics.depth_metrics(metrics.align(a * pred + b, gt, "affine"), gt)
        assert rep.rmse == pytest.approx(base.rmse, abs=1e-9)
        assert rep.rel == pytest.approx(base.rel, abs=1e-9)
        assert rep.delta1 == base.delta1


def test_align_disparity_exact_recovery():
    rng = make_rng(5)
    gt = rng.uniform(0.5, 5.0, (16, 16))
    # prediction affine in inverse-depth space: 1/p = a/g + b
    inv_pred = 0.5 / gt + 0.05
    pred = 1.0 / inv_pred
    aligned = metrics.align(pred, gt, "disparity")
    assert np.allclose(aligned, gt, rtol=1e-9)


def test_align_affine_degenerate_raises():
    gt = np.array([[1.0, 2.0], [3.0, 4.0]])
    with pytest.raises(ValueError):
        metrics.align(np.full((2, 2), 2.0), gt, "affine")


def test_align_unknown_mode():
    with pytest.raises(ValueError):
        metrics.align(np.ones((2, 2)), np.ones((2, 2)), "median")


def test_align_preserves_invalid_pixels():
    gt = np.array([[1.0, 2.0], [3.0, 4.0]])
    pred = np.array([[2.0, 4.1], [5.9, 0.0]])
    aligned = metrics.align(pred, gt, "affine")
    assert aligned[1, 1] == 0.0


def test_delta1_symmetry():
    rng = make_rng(6)
    a = rng.uniform(0.5, 5.0, (12, 12))
    b = rng.uniform(0.5, 5.0, (12, 12))
    assert metrics.depth_metrics(a, b).delta1 == metrics.depth_metrics(b, a).delta1
