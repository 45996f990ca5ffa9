"""Sample serialization and the procedural synthetic-scene generator.

A sample directory holds the same pieces a rendered capture would:

    dataset/<sample_id>/
        manifest.json        camera rig, seed, file inventory
        rgb.png              colorized left view, full resolution
        perfect_depth.dmap   analytic depth, full resolution
        stereo_left.dmap     speckle-textured gray pair, stereo resolution
        stereo_right.dmap
        gt_disparity.dmap    analytic disparity, full resolution
        sensor_depth.dmap    SGM depth, stereo res upsampled to full res

DMAP is a tiny little-endian binary container (header + float32 payload)
so maps round-trip bit-exactly across platforms. The renderer ray-casts
fronto-parallel planes and spheres with a 3D-anchored speckle texture:
both stereo views sample the same world-space pattern, which is what
lets the block matcher find correspondences like a structured-light
sensor would.
"""

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import sgm
from .core import (
    StereoRig,
    depth_to_disparity,
    disparity_to_depth,
    nearest_upsample,
    sample_rig,
    validity_of,
)
from .masking import invalid_pixel_ratio
from .rng import derive_rng

DMAP_MAGIC = b"DMAP"
DMAP_VERSION = 1
_DMAP_HEADER = struct.Struct("<4sHBII")  # magic, version, kind, height, width

KIND_DEPTH = 0
KIND_DISPARITY = 1
KIND_GRAY = 2
KIND_HEATMAP = 3
KIND_NAMES = {0: "depth-m", 1: "disparity-px", 2: "gray", 3: "heatmap"}

DEFAULT_RGB_HW = (960, 1280)
DEFAULT_STEREO_HW = (720, 960)

HISTOGRAM_BINS = 20

# Scene depth budget (meters).
SCENE_NEAR = 0.3
SCENE_FAR = 20.0


class DmapError(ValueError):
    """Malformed or mismatching DMAP file."""


def atomic_write_bytes(path, payload):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_dmap(path, data, kind):
    """Serialize a 2D map; depth/disparity invalids are stored as 0.0."""
    if kind not in KIND_NAMES:
        raise DmapError(f"unknown kind {kind}")
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise DmapError(f"DMAP payload must be 2D, got shape {arr.shape}")
    if kind in (KIND_DEPTH, KIND_DISPARITY):
        arr = np.where(np.isfinite(arr) & (arr > 0), arr, np.float32(0.0))
    elif not np.all(np.isfinite(arr)):
        raise DmapError("gray/heatmap payloads must be finite")
    h, w = arr.shape
    header = _DMAP_HEADER.pack(DMAP_MAGIC, DMAP_VERSION, kind, h, w)
    atomic_write_bytes(path, header + arr.astype("<f4").tobytes())


def read_dmap(path, expect_kind=None):
    """Read a DMAP file back into (float32 array, kind)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _DMAP_HEADER.size:
        raise DmapError(f"{path}: truncated header")
    magic, version, kind, h, w = _DMAP_HEADER.unpack_from(raw)
    if magic != DMAP_MAGIC:
        raise DmapError(f"{path}: bad magic {magic!r}")
    if version != DMAP_VERSION:
        raise DmapError(f"{path}: unsupported version {version}")
    if kind not in KIND_NAMES:
        raise DmapError(f"{path}: unknown kind {kind}")
    if expect_kind is not None and kind != expect_kind:
        raise DmapError(
            f"{path}: kind mismatch, expected {KIND_NAMES[expect_kind]},"
            f" found {KIND_NAMES[kind]}"
        )
    expected = _DMAP_HEADER.size + h * w * 4
    if len(raw) != expected:
        raise DmapError(f"{path}: payload length {len(raw)} != {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_DMAP_HEADER.size).reshape(h, w)
    return data.astype(np.float32), kind


# ---------------------------------------------------------------------------
# Scene description and ray casting
# ---------------------------------------------------------------------------


@dataclass
class Plane:
    """Fronto-parallel textured rectangle at depth z, extent in meters."""

    z: float
    x0: float
    x1: float
    y0: float
    y1: float
    color: tuple = (0.7, 0.7, 0.7)
    texture_seed: int = 0


@dataclass
class Sphere:
    cx: float
    cy: float
    cz: float
    radius: float
    color: tuple = (0.7, 0.7, 0.7)
    texture_seed: int = 0


@dataclass
class SceneSpec:
    seed: int
    primitives: list = field(default_factory=list)
    speckle_cell_m: float = 0.04  # world-space speckle cell size
    light_level: float = 1.0

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        for p in self.primitives:
            z = p.z if isinstance(p, Plane) else p.cz
            if not SCENE_NEAR < z < SCENE_FAR:
                raise ValueError(f"primitive depth {z} outside ({SCENE_NEAR}, {SCENE_FAR})")


def sample_scene(rng, z_wall=(6.0, 12.0), z_objects=(0.8, 4.0), n_objects=(2, 5)):
    """Random scene: one giant backdrop wall plus a few floating objects."""
    prims = []
    zw = float(rng.uniform(*z_wall))
    span = 4.0 * zw  # wide enough to cover any focal length in range
    prims.append(
        Plane(zw, -span, span, -span, span, color=tuple(rng.uniform(0.3, 0.9, 3)),
              texture_seed=int(rng.integers(1 << 31)))
    )
    for _ in range(int(rng.integers(n_objects[0], n_objects[1], endpoint=True))):
        z = float(rng.uniform(*z_objects))
        cx = float(rng.uniform(-0.4, 0.4)) * z
        cy = float(rng.uniform(-0.3, 0.3)) * z
        color = tuple(rng.uniform(0.2, 0.95, 3))
        tex = int(rng.integers(1 << 31))
        if rng.random() < 0.5:
            hx = float(rng.uniform(0.08, 0.35)) * z
            hy = float(rng.uniform(0.08, 0.35)) * z
            prims.append(Plane(z, cx - hx, cx + hx, cy - hy, cy + hy, color, tex))
        else:
            r = float(rng.uniform(0.06, 0.25)) * z
            prims.append(Sphere(cx, cy, z, r, color, tex))
    return SceneSpec(
        seed=0,
        primitives=prims,
        speckle_cell_m=float(rng.uniform(0.025, 0.05)),
        light_level=float(rng.uniform(0.75, 1.0)),
    )


def _hash01(ix, iy, iz, seed):
    """SplitMix-style integer hash of 3D cells -> uniform [0, 1)."""
    h = (
        ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
        ^ np.uint64(seed)
    )
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _speckle(x, y, z, cell, seed):
    """Smooth 3D value noise in [0, 1], anchored to world coordinates.

    Trilinear interpolation of per-cell hashes with smoothstep weights:
    continuous across cell borders, so sub-pixel stereo offsets produce
    graded intensity differences the matcher's subpixel fit can use
    (piecewise-constant dots would quantize disparity to whole pixels).
    """
    fx, fy, fz = x / cell, y / cell, z / cell
    ix, iy, iz = (np.floor(v).astype(np.int64) for v in (fx, fy, fz))
    wx, wy, wz = (v - np.floor(v) for v in (fx, fy, fz))
    # smoothstep for C1 continuity at cell borders
    wx, wy, wz = (w * w * (3.0 - 2.0 * w) for w in (wx, wy, wz))
    out = np.zeros_like(wx)
    for dx_ in (0, 1):
        for dy_ in (0, 1):
            for dz_ in (0, 1):
                corner = _hash01(ix + dx_, iy + dy_, iz + dz_, seed)
                weight = (
                    (wx if dx_ else 1.0 - wx)
                    * (wy if dy_ else 1.0 - wy)
                    * (wz if dz_ else 1.0 - wz)
                )
                out += corner * weight
    return out


def _cast(scene, rig, hw, origin_x):
    """Ray-cast one view; returns (depth, prim_id, X, Y) per pixel."""
    h, w = hw
    dx = (np.arange(w) + 0.5 - rig.cx) / rig.focal_px
    dy = (np.arange(h) + 0.5 - rig.cy) / rig.focal_px
    dxg, dyg = np.meshgrid(dx, dy)
    depth = np.full((h, w), np.inf)
    prim_id = np.full((h, w), -1, dtype=np.int32)
    for i, prim in enumerate(scene.primitives):
        if isinstance(prim, Plane):
            t = prim.z
            px = origin_x + t * dxg
            py = t * dyg
            hit = (px >= prim.x0) & (px <= prim.x1) & (py >= prim.y0) & (py <= prim.y1)
            t_hit = np.where(hit, t, np.inf)
        else:
            ox, oy, oz = origin_x - prim.cx, -prim.cy, -prim.cz
            a = dxg**2 + dyg**2 + 1.0
            b = 2.0 * (ox * dxg + oy * dyg + oz)
            c = ox * ox + oy * oy + oz * oz - prim.radius**2
            disc = b * b - 4.0 * a * c
            with np.errstate(invalid="ignore"):
                t = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
            t_hit = np.where((disc >= 0) & (t > 1e-6), t, np.inf)
        closer = t_hit < depth
        depth[closer] = t_hit[closer]
        prim_id[closer] = i
    hit = np.isfinite(depth)
    x = np.where(hit, origin_x + depth * dxg, 0.0)
    y = np.where(hit, depth * dyg, 0.0)
    return np.where(hit, depth, 0.0), prim_id, x, y


def _shade_gray(scene, depth, prim_id, x, y):
    """Speckle shading anchored to world space, shared by both views."""
    gray = np.full(depth.shape, 0.02)
    for i, prim in enumerate(scene.primitives):
        sel = prim_id == i
        if not sel.any():
            continue
        s = _speckle(x[sel], y[sel], depth[sel], scene.speckle_cell_m, prim.texture_seed)
        gray[sel] = scene.light_level * (0.15 + 0.7 * s)
    return np.clip(gray, 0.0, 1.0).astype(np.float32)


def _shade_rgb(scene, depth, prim_id, x, y):
    rgb = np.zeros(depth.shape + (3,))
    for i, prim in enumerate(scene.primitives):
        sel = prim_id == i
        if not sel.any():
            continue
        s = _speckle(x[sel], y[sel], depth[sel], scene.speckle_cell_m, prim.texture_seed)
        shade = scene.light_level * (0.55 + 0.45 * s)
        rgb[sel] = np.asarray(prim.color)[None, :] * shade[:, None]
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


@dataclass
class RenderedSample:
    rgb: np.ndarray            # (H, W, 3) in [0,1]
    perfect_depth: np.ndarray  # (H, W) meters
    gt_disparity: np.ndarray   # (H, W) pixels at full resolution
    stereo_left: np.ndarray    # (h, w) gray
    stereo_right: np.ndarray   # (h, w) gray
    rig: StereoRig             # full-resolution rig


def render_synthetic(scene, rig, rgb_hw=DEFAULT_RGB_HW, stereo_hw=DEFAULT_STEREO_HW):
    """Render one sample: RGB + perfect depth + disparity + stereo pair.

    The RGB camera coincides with the left stereo camera, so RGB, depth
    and disparity are pixel-aligned; the right camera sits baseline_m to
    the +x side. The stereo pair is rendered at its own (lower)
    resolution with a proportionally scaled rig.
    """
    if not 0 < rig.baseline_m < 0.5:
        raise ValueError(f"baseline {rig.baseline_m} outside (0, 0.5) m")
    if min(rgb_hw) < 14 or min(stereo_hw) < 14:
        raise ValueError("render resolutions must be at least 14 px per side")
    depth, pid, x, y = _cast(scene, rig, rgb_hw, 0.0)
    rgb = _shade_rgb(scene, depth, pid, x, y)
    disparity = depth_to_disparity(depth, rig)

    s_rig = rig.scaled(stereo_hw[1] / rgb_hw[1], stereo_hw[0] / rgb_hw[0])
    dl, pidl, xl, yl = _cast(scene, s_rig, stereo_hw, 0.0)
    dr, pidr, xr, yr = _cast(scene, s_rig, stereo_hw, rig.baseline_m)
    left = _shade_gray(scene, dl, pidl, xl, yl)
    right = _shade_gray(scene, dr, pidr, xr, yr)
    return RenderedSample(rgb, depth.astype(np.float32), disparity, left, right, rig)


def sensor_sgm_config(gt_disparity, rgb_w, stereo_w, **overrides):
    """SGM config sized from the sample's own disparity range."""
    valid = validity_of(gt_disparity)
    top = float(gt_disparity[valid].max()) if valid.any() else 16.0
    max_disp = int(np.ceil(top * stereo_w / rgb_w)) + 8
    max_disp = max(16, min(max_disp, stereo_w - 8))
    return sgm.SgmConfig(max_disparity=max_disp, **overrides)


def make_sensor_depth(sample, cfg=None):
    """Simulated sensor depth: SGM at stereo res, upsampled to full res."""
    h, w = sample.rgb.shape[:2]
    sh, sw = sample.stereo_left.shape
    if cfg is None:
        cfg = sensor_sgm_config(sample.gt_disparity, w, sw)
    disp = sgm.sgm_match(sample.stereo_left, sample.stereo_right, cfg)
    s_rig = sample.rig.scaled(sw / w, sh / h)
    depth = disparity_to_depth(disp, s_rig)
    return nearest_upsample(depth, h, w).astype(np.float32)


# ---------------------------------------------------------------------------
# Sample directories and manifests
# ---------------------------------------------------------------------------

SAMPLE_FILES = {
    "rgb": "rgb.png",
    "perfect_depth": "perfect_depth.dmap",
    "stereo_left": "stereo_left.dmap",
    "stereo_right": "stereo_right.dmap",
    "gt_disparity": "gt_disparity.dmap",
    "sensor_depth": "sensor_depth.dmap",
}

MANIFEST_NAME = "manifest.json"


@dataclass
class SampleManifest:
    sample_id: str
    seed: int
    rig: StereoRig
    rgb_hw: tuple
    stereo_hw: tuple
    files: dict = field(default_factory=lambda: dict(SAMPLE_FILES))

    def to_json(self):
        doc = {
            "sample_id": self.sample_id,
            "seed": self.seed,
            "rig": dataclasses.asdict(self.rig),
            "rgb_hw": list(self.rgb_hw),
            "stereo_hw": list(self.stereo_hw),
            "files": self.files,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(
            sample_id=doc["sample_id"],
            seed=doc["seed"],
            rig=StereoRig(**doc["rig"]),
            rgb_hw=tuple(doc["rgb_hw"]),
            stereo_hw=tuple(doc["stereo_hw"]),
            files=dict(doc["files"]),
        )


def write_manifest(sample_dir, manifest):
    atomic_write_bytes(
        os.path.join(sample_dir, MANIFEST_NAME), manifest.to_json().encode("utf-8")
    )


def read_manifest(sample_dir, check_files=False):
    with open(os.path.join(sample_dir, MANIFEST_NAME), "r", encoding="utf-8") as fh:
        manifest = SampleManifest.from_json(fh.read())
    if check_files:
        for name in manifest.files.values():
            path = os.path.join(sample_dir, name)
            if not os.path.exists(path):
                raise FileNotFoundError(f"manifest references missing file {path}")
    return manifest


def write_png(path, img01):
    from PIL import Image

    arr = np.clip(np.asarray(img01) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    tmp = f"{path}.tmp.{os.getpid()}"
    Image.fromarray(arr).save(tmp, format="PNG")
    os.replace(tmp, path)


def read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def generate_sample(sample_dir, sample_id, seed, rgb_hw=DEFAULT_RGB_HW,
                    stereo_hw=DEFAULT_STEREO_HW, sgm_cfg=None):
    """Render, match, and persist one full sample directory."""
    rng = derive_rng(seed, 0)
    rig = sample_rig(rng, rgb_hw[1], rgb_hw[0])
    scene = sample_scene(rng)
    scene.seed = seed
    sample = render_synthetic(scene, rig, rgb_hw, stereo_hw)
    sensor = make_sensor_depth(sample, sgm_cfg)

    os.makedirs(sample_dir, exist_ok=True)
    write_png(os.path.join(sample_dir, SAMPLE_FILES["rgb"]), sample.rgb)
    write_dmap(os.path.join(sample_dir, SAMPLE_FILES["perfect_depth"]),
               sample.perfect_depth, KIND_DEPTH)
    write_dmap(os.path.join(sample_dir, SAMPLE_FILES["stereo_left"]),
               sample.stereo_left, KIND_GRAY)
    write_dmap(os.path.join(sample_dir, SAMPLE_FILES["stereo_right"]),
               sample.stereo_right, KIND_GRAY)
    write_dmap(os.path.join(sample_dir, SAMPLE_FILES["gt_disparity"]),
               sample.gt_disparity, KIND_DISPARITY)
    write_dmap(os.path.join(sample_dir, SAMPLE_FILES["sensor_depth"]),
               sensor, KIND_DEPTH)
    manifest = SampleManifest(sample_id, seed, rig, rgb_hw, stereo_hw)
    write_manifest(sample_dir, manifest)
    return manifest


def list_sample_dirs(dataset_dir):
    out = []
    for name in sorted(os.listdir(dataset_dir)):
        path = os.path.join(dataset_dir, name)
        if os.path.isdir(path) and os.path.exists(os.path.join(path, MANIFEST_NAME)):
            out.append(path)
    return out


def dataset_mask_histogram(sample_dirs):
    """20-bin histogram over [0,1] of sensor-depth invalid-pixel ratios."""
    ratios = []
    for d in sample_dirs:
        manifest = read_manifest(d)
        depth, _ = read_dmap(
            os.path.join(d, manifest.files["sensor_depth"]), KIND_DEPTH
        )
        ratios.append(invalid_pixel_ratio(validity_of(depth)))
    if not ratios:
        raise ValueError("histogram needs at least one sample")
    counts, edges = np.histogram(ratios, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    return counts, edges, np.asarray(ratios)
