"""Semi-global stereo matching used to simulate sensor depth.

Pipeline: census transform -> Hamming cost volume -> multi-path cost
aggregation -> winner-take-all with uniqueness + parabolic subpixel ->
left-right consistency check. The uniqueness and LR stages are what
punch the realistic holes (occlusions, texture-poor regions) into the
simulated sensor depth.

All stages are deterministic; directional aggregation passes are
independent per scanline, so parallel execution over paths/scanlines
yields bit-identical results to the sequential order used here.
"""

from dataclasses import dataclass

import numpy as np

# Sentinel for "no candidate" while staying clear of int32 overflow.
_BIG = np.int32(1 << 29)


@dataclass
class SgmConfig:
    max_disparity: int
    census_window: tuple = (5, 5)
    p1: int = 8
    p2: int = 96
    num_paths: int = 8
    lr_tolerance: float = 1.0
    uniqueness_ratio: float = 0.95

    def __post_init__(self):
        ch, cw = self.census_window
        if ch % 2 == 0 or cw % 2 == 0:
            raise ValueError(f"census window must be odd, got {ch}x{cw}")
        if ch * cw - 1 > 64:
            raise ValueError("census window exceeds 64 neighbor bits")
        if not (0 < self.p1 < self.p2):
            raise ValueError(f"need p2 > p1 > 0, got p1={self.p1} p2={self.p2}")
        if self.max_disparity < 1:
            raise ValueError("max_disparity must be >= 1")
        if self.num_paths not in (4, 8):
            raise ValueError("num_paths must be 4 or 8")

    @property
    def census_bits(self):
        ch, cw = self.census_window
        return ch * cw - 1


def census_transform(img, window=(5, 5)):
    """Per-pixel census descriptor packed into uint64.

    Bit k is set iff neighbor k (row-major window order, center excluded)
    is darker than the center pixel. Pixels whose window does not fit
    strictly inside the image keep an all-zero descriptor.
    """
    ch, cw = window
    if ch % 2 == 0 or cw % 2 == 0:
        raise ValueError(f"census window must be odd, got {ch}x{cw}")
    img = np.asarray(img)
    h, w = img.shape
    rh, rw = ch // 2, cw // 2
    desc = np.zeros((h, w), dtype=np.uint64)
    if h < ch or w < cw:
        return desc
    center = img[rh : h - rh, rw : w - rw]
    interior = np.zeros_like(center, dtype=np.uint64)
    k = 0
    for dy in range(-rh, rh + 1):
        for dx in range(-rw, rw + 1):
            if dy == 0 and dx == 0:
                continue
            neigh = img[rh + dy : h - rh + dy, rw + dx : w - rw + dx]
            interior |= (neigh < center).astype(np.uint64) << np.uint64(k)
            k += 1
    desc[rh : h - rh, rw : w - rw] = interior
    return desc


def build_cost_volume(left_census, right_census, max_disparity, census_bits):
    """Hamming-distance cost volume for left-view matching.

    cost[y, x, d] compares the left descriptor at x with the right
    descriptor at x - d; columns where x - d falls off the image get the
    maximum cost (census_bits).
    """
    l = np.asarray(left_census)
    r = np.asarray(right_census)
    if l.shape != r.shape:
        raise ValueError(f"census shapes differ: {l.shape} vs {r.shape}")
    h, w = l.shape
    cost = np.full((h, w, max_disparity), census_bits, dtype=np.uint16)
    for d in range(max_disparity):
        if d >= w:
            break
        cost[:, d:, d] = np.bitwise_count(l[:, d:] ^ r[:, : w - d])
    return cost


def _penalized_step(prev, p1, p2):
    """One SGM recurrence step given the predecessor's (M, D) path costs.

    Returns min(prev[d], prev[d +- 1] + P1, min_d prev + P2) - min_d prev,
    evaluated per predecessor pixel.
    """
    m = prev.min(axis=-1, keepdims=True)
    shift_up = np.empty_like(prev)
    shift_up[..., 1:] = prev[..., :-1]
    shift_up[..., 0] = _BIG
    shift_dn = np.empty_like(prev)
    shift_dn[..., :-1] = prev[..., 1:]
    shift_dn[..., -1] = _BIG
    best = np.minimum(prev, np.minimum(shift_up + p1, shift_dn + p1))
    np.minimum(best, m + p2, out=best)
    return best - m


def _aggregate_dir(cost, dy, dx, p1, p2):
    """Path costs for one scan direction (dy, dx), int32 (H, W, D)."""
    h, w, _ = cost.shape
    out = cost.astype(np.int32)
    if dy == 0:
        xs = range(1, w) if dx > 0 else range(w - 2, -1, -1)
        for x in xs:
            out[:, x] += _penalized_step(out[:, x - dx], p1, p2)
    else:
        ys = range(1, h) if dy > 0 else range(h - 2, -1, -1)
        for y in ys:
            pen = _penalized_step(out[y - dy], p1, p2)
            if dx == 0:
                out[y] += pen
            elif dx > 0:
                out[y, dx:] += pen[:-dx]
            else:
                out[y, :dx] += pen[-dx:]
    return out


_PATHS_4 = ((0, 1), (0, -1), (1, 0), (-1, 0))
_PATHS_8 = _PATHS_4 + ((1, 1), (-1, -1), (1, -1), (-1, 1))


def aggregate_paths(cost, cfg):
    """Sum of directional path costs over cfg.num_paths directions."""
    dirs = _PATHS_8 if cfg.num_paths == 8 else _PATHS_4
    agg = np.zeros(cost.shape, dtype=np.int32)
    for dy, dx in dirs:
        agg += _aggregate_dir(cost, dy, dx, cfg.p1, cfg.p2)
    return agg


def select_disparity(agg, cfg, subpixel=True):
    """Winner-take-all with uniqueness filtering and parabolic refinement.

    A pixel is invalidated when the ratio best/second-best exceeds
    cfg.uniqueness_ratio for some non-adjacent disparity (|d - d*| > 1),
    i.e. when a distant candidate is nearly as good as the winner.
    Interior winners are refined by the parabola through the three costs
    around d*, clamped to +-0.5 px; d* = 0 maps to disparity 0, which the
    map convention treats as invalid.
    """
    h, w, dmax = agg.shape
    d_star = np.argmin(agg, axis=2)
    best = np.take_along_axis(agg, d_star[..., None], axis=2)[..., 0]

    dgrid = np.arange(dmax)
    adjacent = np.abs(dgrid[None, None, :] - d_star[..., None]) <= 1
    second = np.where(adjacent, _BIG, agg).min(axis=2).astype(np.float64)
    has_rival = second < _BIG
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(second > 0, best / second, 1.0)
    invalid = has_rival & (ratio > cfg.uniqueness_ratio)

    disp = d_star.astype(np.float32)
    if subpixel:
        interior = (d_star > 0) & (d_star < dmax - 1)
        lo = np.take_along_axis(agg, np.maximum(d_star - 1, 0)[..., None], 2)[..., 0]
        hi = np.take_along_axis(agg, np.minimum(d_star + 1, dmax - 1)[..., None], 2)[..., 0]
        denom = lo + hi - 2 * best
        with np.errstate(divide="ignore", invalid="ignore"):
            offset = np.where(
                interior & (denom > 0), (lo - hi) / (2.0 * denom), 0.0
            )
        disp += np.clip(offset, -0.5, 0.5).astype(np.float32)
    disp[invalid] = 0.0
    return disp


def left_right_check(disp_left, disp_right, tol=1.0):
    """Keep left-view pixels whose right-view counterpart agrees within tol.

    Pixel (x, y) survives iff disp_right at (x - round(disp_left), y) is
    valid and differs from disp_left by at most tol; everything else,
    including lookups that fall off the image, becomes invalid.
    """
    dl = np.asarray(disp_left)
    dr = np.asarray(disp_right)
    if dl.shape != dr.shape:
        raise ValueError(f"disparity shapes differ: {dl.shape} vs {dr.shape}")
    h, w = dl.shape
    valid = dl > 0
    xr = (np.arange(w)[None, :] - np.rint(dl)).astype(np.int64)
    in_bounds = (xr >= 0) & (xr < w)
    xr_safe = np.clip(xr, 0, w - 1)
    looked = dr[np.arange(h)[:, None], xr_safe]
    keep = valid & in_bounds & (looked > 0) & (np.abs(dl - looked) <= tol)
    return np.where(keep, dl, 0.0).astype(np.float32)


def sgm_match(left, right, cfg):
    """Full SGM pass for a rectified pair; returns left-view disparity.

    Matches both directions (the right-view pass runs on horizontally
    mirrored images, which reuses the same left-matching code) and keeps
    only left pixels that survive the left-right check.
    """
    left = np.asarray(left)
    right = np.asarray(right)
    if left.shape != right.shape:
        raise ValueError(f"image shapes differ: {left.shape} vs {right.shape}")
    bits = cfg.census_bits

    cl = census_transform(left, cfg.census_window)
    cr = census_transform(right, cfg.census_window)
    disp_l = select_disparity(
        aggregate_paths(build_cost_volume(cl, cr, cfg.max_disparity, bits), cfg), cfg
    )

    # Right-view matching via mirroring: flipping both images turns the
    # right image into a "left" one with the same positive disparities.
    clf = census_transform(left[:, ::-1], cfg.census_window)
    crf = census_transform(right[:, ::-1], cfg.census_window)
    disp_r = select_disparity(
        aggregate_paths(build_cost_volume(crf, clf, cfg.max_disparity, bits), cfg), cfg
    )[:, ::-1]

    return left_right_check(disp_l, disp_r, cfg.lr_tolerance)
