"""Dense-map conventions and pinhole stereo geometry.

Maps are plain 2D numpy arrays (float32 on disk, any float dtype in
memory) with one shared validity convention:

* depth maps hold metric meters, disparity maps hold pixels;
* a non-finite or <= 0 value marks an invalid measurement and is stored
  as exactly 0, so binary files round-trip and masks stay recomputable;
* gray / RGB images hold intensities in [0, 1].

Pixel (i, j) covers the unit square with center (j + 0.5, i + 0.5); the
principal point (cx, cy) lives in those continuous coordinates. Resizes
use the half-pixel-center convention (align-corners = false) throughout.
"""

from dataclasses import dataclass

import numpy as np

DEFAULT_SENSOR_WIDTH_MM = 36.0

# Uniform sampling ranges for synthetic stereo rigs.
BASELINE_RANGE_M = (0.05, 0.2)
FOCAL_RANGE_MM = (16.0, 28.0)


@dataclass
class StereoRig:
    """Rectified pinhole rig tied to one image resolution.

    focal_px / cx / cy are in pixels of that resolution; baseline_m is the
    metric distance to the right camera along +x. sensor_width_mm is kept
    so the millimeter focal length can be recovered:
    focal_mm = focal_px * sensor_width_mm / image_width.
    """

    focal_px: float
    cx: float
    cy: float
    baseline_m: float
    sensor_width_mm: float = DEFAULT_SENSOR_WIDTH_MM

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ValueError(f"focal_px must be positive, got {self.focal_px}")
        if self.baseline_m <= 0:
            raise ValueError(f"baseline_m must be positive, got {self.baseline_m}")
        if self.sensor_width_mm <= 0:
            raise ValueError("sensor_width_mm must be positive")

    def focal_mm(self, image_width):
        return self.focal_px * self.sensor_width_mm / image_width

    def scaled(self, sx, sy):
        """Rig for the same camera at a resolution scaled by (sx, sy)."""
        return StereoRig(
            focal_px=self.focal_px * sx,
            cx=self.cx * sx,
            cy=self.cy * sy,
            baseline_m=self.baseline_m,
            sensor_width_mm=self.sensor_width_mm,
        )


def rig_from_mm(focal_mm, baseline_m, width, height, sensor_width_mm=DEFAULT_SENSOR_WIDTH_MM):
    """Build a rig from a millimeter focal length, principal point centered."""
    focal_px = focal_mm / sensor_width_mm * width
    return StereoRig(
        focal_px=focal_px,
        cx=width / 2.0,
        cy=height / 2.0,
        baseline_m=baseline_m,
        sensor_width_mm=sensor_width_mm,
    )


def sample_rig(rng, width, height, sensor_width_mm=DEFAULT_SENSOR_WIDTH_MM):
    """Draw a random rig: focal uniform in mm, baseline uniform in meters."""
    focal_mm = rng.uniform(*FOCAL_RANGE_MM)
    baseline = rng.uniform(*BASELINE_RANGE_M)
    return rig_from_mm(focal_mm, baseline, width, height, sensor_width_mm)


def validity_of(map2d):
    """Boolean mask, true exactly where the value is finite and > 0."""
    m = np.asarray(map2d)
    with np.errstate(invalid="ignore"):
        return np.isfinite(m) & (m > 0)


def sanitize_map(map2d):
    """Force the invalid-encoding convention: anything non-valid becomes 0."""
    m = np.asarray(map2d)
    return np.where(validity_of(m), m, np.zeros((), dtype=m.dtype))


def invalid_fraction(map2d):
    return 1.0 - float(validity_of(map2d).mean())


def disparity_to_depth(disp, rig):
    """depth = focal_px * baseline / disparity; invalid pixels stay 0."""
    d = np.asarray(disp, dtype=np.float32)
    valid = validity_of(d)
    out = np.zeros_like(d)
    np.divide(rig.focal_px * rig.baseline_m, d, out=out, where=valid)
    return out


def depth_to_disparity(depth, rig):
    """disparity = focal_px * baseline / depth; invalid pixels stay 0."""
    # Same reciprocal relation both ways.
    return disparity_to_depth(depth, rig)


def nearest_resample(map2d, out_h, out_w):
    """Nearest-neighbor resample (either direction), half-pixel centers.

    Source index = floor((i + 0.5) * in / out). Every output value is a
    copy of some source value, so invalid pixels stay invalid and no new
    values appear.
    """
    m = np.asarray(map2d)
    in_h, in_w = m.shape
    rows = ((np.arange(out_h) + 0.5) * in_h / out_h).astype(np.int64)
    cols = ((np.arange(out_w) + 0.5) * in_w / out_w).astype(np.int64)
    return m[rows[:, None], cols[None, :]]


def nearest_upsample(map2d, out_h, out_w):
    """nearest_resample restricted to upsampling (sensor-depth contract)."""
    in_h, in_w = np.asarray(map2d).shape
    if out_h < in_h or out_w < in_w:
        raise ValueError(
            f"nearest_upsample cannot downscale: {in_h}x{in_w} -> {out_h}x{out_w}"
        )
    return nearest_resample(map2d, out_h, out_w)


def bilinear_resize(map2d, out_h, out_w):
    """Bilinear resize (align-corners = false), 2D or channels-last 3D.

    Source coordinate = (i + 0.5) * in / out - 0.5, clamped to the valid
    range so border samples are edge-replicated. A constant input maps to
    the same constant; a linear field is reproduced exactly away from the
    clamped border.
    """
    m = np.asarray(map2d, dtype=np.float64)
    in_h, in_w = m.shape[:2]

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    r0, r1, fr = axis_coords(in_h, out_h)
    c0, c1, fc = axis_coords(in_w, out_w)
    if m.ndim == 3:
        fr = fr[:, None, None]
        fc = fc[None, :, None]
    else:
        fr = fr[:, None]
        fc = fc[None, :]
    top = m[r0][:, c0] * (1 - fc) + m[r0][:, c1] * fc
    bot = m[r1][:, c0] * (1 - fc) + m[r1][:, c1] * fc
    out = top * (1 - fr) + bot * fr
    return out.astype(np.asarray(map2d).dtype, copy=False)


def check_image(img, channels=None, min_side=1):
    """Validate an intensity image: finite, within [0, 1], large enough."""
    a = np.asarray(img)
    if channels is None and a.ndim != 2:
        raise ValueError(f"expected 2D image, got shape {a.shape}")
    if channels is not None and (a.ndim != 3 or a.shape[2] != channels):
        raise ValueError(f"expected HxWx{channels} image, got shape {a.shape}")
    if a.shape[0] < min_side or a.shape[1] < min_side:
        raise ValueError(f"image {a.shape} smaller than {min_side} pixels per side")
    if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 1:
        raise ValueError("image values must be finite and within [0, 1]")
    return a
