"""Depth / disparity error metrics and prediction-to-GT alignment.

All metrics are computed over pixels valid in BOTH maps. Alignment
offers the usual invariance regimes: scale-only, affine (scale + shift),
and disparity-space affine (fit on inverse depth, then invert back).
Estimators are plain least squares.
"""

from dataclasses import dataclass

import numpy as np

from .core import validity_of

ALIGN_MODES = ("none", "scale", "affine", "disparity")

DELTA1_THRESHOLD = 1.25
MIN_ALIGNED_INV_DEPTH = 1e-6


@dataclass
class MetricReport:
    rmse: float
    mae: float
    rel: float
    delta1: float
    valid_count: int


def _joint_valid(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    joint = validity_of(pred) & validity_of(gt)
    return pred, gt, joint


def depth_metrics(pred, gt):
    """RMSE / MAE / REL / delta1 over jointly valid pixels."""
    pred, gt, joint = _joint_valid(pred, gt)
    n = int(joint.sum())
    if n == 0:
        raise ValueError("no jointly valid pixels to evaluate")
    p, g = pred[joint], gt[joint]
    err = p - g
    ratio = np.maximum(p / g, g / p)
    return MetricReport(
        rmse=float(np.sqrt(np.mean(err**2))),
        mae=float(np.mean(np.abs(err))),
        rel=float(np.mean(np.abs(err) / g)),
        delta1=float(np.mean(ratio < DELTA1_THRESHOLD)),
        valid_count=n,
    )


def disparity_metrics(pred, gt, threshold=1.0):
    """(EPE, bad-pixel fraction) over jointly valid pixels.

    The bad-pixel rate counts errors strictly larger than the threshold:
    an error of exactly `threshold` pixels is not bad.
    """
    pred, gt, joint = _joint_valid(pred, gt)
    n = int(joint.sum())
    if n == 0:
        raise ValueError("no jointly valid pixels to evaluate")
    err = np.abs(pred[joint] - gt[joint])
    return float(np.mean(err)), float(np.mean(err > threshold))


def _affine_fit(x, y):
    """Least-squares (s, b) minimizing sum (s*x + b - y)^2."""
    n = x.size
    sx, sy = x.sum(), y.sum()
    sxx, sxy = (x * x).sum(), (x * y).sum()
    det = n * sxx - sx * sx
    if det <= 0 or not np.isfinite(det):
        raise ValueError("degenerate alignment: prediction has no variance")
    s = (n * sxy - sx * sy) / det
    b = (sy * sxx - sx * sxy) / det
    return s, b


def align(pred, gt, mode):
    """Map prediction onto GT under the chosen invariance regime.

    The fit uses jointly valid pixels; the transform is then applied to
    every valid prediction pixel. Transformed values that land at or
    below zero are marked invalid (0).
    """
    if mode not in ALIGN_MODES:
        raise ValueError(f"unknown align mode {mode!r}; choose from {ALIGN_MODES}")
    pred = np.asarray(pred, dtype=np.float64)
    if mode == "none":
        return pred.copy()
    _, gt64, joint = _joint_valid(pred, gt)
    if int(joint.sum()) < 2:
        raise ValueError("need at least 2 jointly valid pixels to align")
    p, g = pred[joint], gt64[joint]
    pvalid = validity_of(pred)

    if mode == "scale":
        s = float((p * g).sum() / (p * p).sum())
        out = np.where(pvalid, s * pred, 0.0)
    elif mode == "affine":
        s, b = _affine_fit(p, g)
        out = np.where(pvalid, s * pred + b, 0.0)
    else:  # disparity: affine in inverse-depth space
        s, b = _affine_fit(1.0 / p, 1.0 / g)
        with np.errstate(divide="ignore"):
            inv = np.maximum(s / pred + b, MIN_ALIGNED_INV_DEPTH)
            out = np.where(pvalid, 1.0 / inv, 0.0)
    out[out <= 0] = 0.0
    return out
