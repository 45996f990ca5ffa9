"""Patch-level token masking driven by missing depth measurements.

Token mask decisions follow a three-stage rule: fully-hollow depth
patches are always masked, partially-hollow ("mixed") patches are masked
with a fixed high probability, and if those two stages fall short of the
sampled target ratio the balance is filled by masking fully-valid
patches chosen uniformly without replacement. Mixed patches that survive
stage 2 stay unmasked: imperfect depth readings are still signal.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class MaskingConfig:
    patch: int = 14
    p_mixed: float = 0.75
    ratio_range: tuple = (0.60, 0.90)

    def __post_init__(self):
        if not 0 <= self.p_mixed <= 1:
            raise ValueError(f"p_mixed must be in [0,1], got {self.p_mixed}")
        lo, hi = self.ratio_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"bad ratio_range {self.ratio_range}")
        if self.patch < 1:
            raise ValueError("patch must be >= 1")


def patch_validity(valid_mask, patch):
    """Per-patch fraction of valid pixels, shape (H/patch, W/patch)."""
    m = np.asarray(valid_mask, dtype=bool)
    h, w = m.shape
    if h % patch or w % patch:
        raise ValueError(f"{h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    return m.reshape(gh, patch, gw, patch).mean(axis=(1, 3))


def invalid_pixel_ratio(valid_mask):
    """Fraction of invalid pixels; the dataset's 'original mask ratio'."""
    m = np.asarray(valid_mask, dtype=bool)
    return 1.0 - float(m.mean())


def sample_mask_ratio(cfg, rng):
    """Uniform draw of the per-sample target masking ratio."""
    return float(rng.uniform(cfg.ratio_range[0], cfg.ratio_range[1]))


def sample_token_mask(pv, target_ratio, cfg, rng):
    """Token mask (True = masked) over the patch grid.

    Stage 1: valid_fraction == 0  -> always masked.
    Stage 2: 0 < valid_fraction < 1 -> masked with probability p_mixed.
    Stage 3: top up with uniformly chosen fully-valid patches until
    ceil(target_ratio * N) tokens are masked; overshoot from stages 1-2
    stands, and nothing is ever unmasked.
    """
    if not 0 < target_ratio <= 1:
        raise ValueError(f"target_ratio must be in (0,1], got {target_ratio}")
    pv = np.asarray(pv, dtype=np.float64)
    n = pv.size

    mixed_draws = rng.random(pv.shape)
    mask = (pv == 0) | ((pv < 1) & (mixed_draws < cfg.p_mixed))

    target = math.ceil(target_ratio * n)
    short = target - int(mask.sum())
    if short > 0:
        flat = mask.ravel()
        candidates = np.flatnonzero((pv.ravel() == 1.0) & ~flat)
        if candidates.size:
            picked = rng.choice(candidates, size=min(short, candidates.size), replace=False)
            flat[picked] = True
            mask = flat.reshape(pv.shape)
    return mask
