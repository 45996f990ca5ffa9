"""Fixed turbo-style colormap so emitted PNGs are byte-comparable.

The 256-entry LUT is generated once at import from the published
5th-degree polynomial fit of the turbo map; the evaluation is exact
float64 arithmetic, so the table is identical on every platform.
"""

import numpy as np

_R = (0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943)
_G = (0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604)
_B = (0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973)


def _poly(coeffs, t):
    acc = np.zeros_like(t)
    for c in reversed(coeffs):
        acc = acc * t + c
    return acc


def _build_lut():
    t = np.arange(256, dtype=np.float64) / 255.0
    rgb = np.stack([_poly(_R, t), _poly(_G, t), _poly(_B, t)], axis=1)
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


TURBO_LUT = _build_lut()


def apply_colormap(values01):
    """Map [0,1] values through the LUT; NaN/out-of-range are clipped."""
    v = np.nan_to_num(np.asarray(values01, dtype=np.float64), nan=0.0)
    idx = np.clip(np.round(v * 255.0), 0, 255).astype(np.uint8)
    return TURBO_LUT[idx]


def colorize_depth(depth):
    """Depth map -> RGB uint8; valid range min-max scaled, invalid black."""
    d = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(d) & (d > 0)
    out = np.zeros(d.shape + (3,), dtype=np.uint8)
    if not valid.any():
        return out
    lo, hi = d[valid].min(), d[valid].max()
    span = hi - lo if hi > lo else 1.0
    norm = (d - lo) / span
    colored = apply_colormap(norm)
    out[valid] = colored[valid]
    return out
