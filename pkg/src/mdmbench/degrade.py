"""Block-wise masking and sensor-style noise at four difficulty levels.

Corruption = multiplicative Gaussian noise (sigma proportional to depth,
matching the depth-dependent error growth of structured-light sensors)
plus sparse shot-noise outliers, 1 mm quantization, and randomly placed
rectangular dropouts. Severity grows monotonically easy -> extreme.

Every operation consumes a numpy Generator and is pure given its draws;
identical (input, level, seed) triples produce bit-identical outputs.
"""

from dataclasses import dataclass

import numpy as np

from .core import validity_of

LEVEL_NAMES = ("easy", "medium", "hard", "extreme")

QUANT_STEP_M = 0.001  # 1 mm depth quantization


@dataclass
class LevelParams:
    """Corruption knobs for one difficulty level.

    num_blocks:  inclusive (lo, hi) count of dropout rectangles
    block_side:  (lo, hi) side length as a fraction of min(H, W)
    gauss_sigma: Gaussian noise std as a fraction of each pixel's depth
    shot_prob:   per-pixel probability of a shot-noise outlier
    shot_scale:  (lo, hi) multiplicative range of an outlier
    """

    num_blocks: tuple
    block_side: tuple
    gauss_sigma: float
    shot_prob: float
    shot_scale: tuple

    def __post_init__(self):
        if not 0 <= self.shot_prob <= 1:
            raise ValueError(f"shot_prob must be in [0,1], got {self.shot_prob}")
        if self.gauss_sigma < 0:
            raise ValueError("gauss_sigma must be >= 0")
        lo, hi = self.num_blocks
        if lo < 0 or hi < lo:
            raise ValueError(f"bad num_blocks range {self.num_blocks}")
        lo, hi = self.block_side
        if not (0 <= lo <= hi <= 1):
            raise ValueError(f"bad block_side range {self.block_side}")
        lo, hi = self.shot_scale
        if not (0 < lo <= hi):
            raise ValueError(f"bad shot_scale range {self.shot_scale}")


def default_levels():
    """Built-in level table; callers may override via load_level_table."""
    return {
        "easy": LevelParams((2, 4), (0.05, 0.10), 0.005, 0.001, (0.80, 1.25)),
        "medium": LevelParams((4, 8), (0.10, 0.20), 0.010, 0.005, (0.67, 1.50)),
        "hard": LevelParams((8, 16), (0.15, 0.30), 0.020, 0.010, (0.50, 2.00)),
        "extreme": LevelParams((16, 32), (0.20, 0.40), 0.040, 0.020, (0.33, 3.00)),
    }


def load_level_table(path):
    """Read a level table from a plain-text key-value file.

    Lines look like ``easy.num_blocks = 2 4``; '#' starts a comment.
    Every listed level must define all five parameters.
    """
    fields = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'level.param = values'")
            key, _, value = line.partition("=")
            try:
                level, param = key.strip().split(".")
            except ValueError:
                raise ValueError(f"{path}:{lineno}: key must be 'level.param'") from None
            fields.setdefault(level, {})[param] = [float(v) for v in value.split()]

    table = {}
    for level, params in fields.items():
        try:
            nb = params["num_blocks"]
            bs = params["block_side"]
            table[level] = LevelParams(
                num_blocks=(int(nb[0]), int(nb[-1])),
                block_side=(bs[0], bs[-1]),
                gauss_sigma=params["gauss_sigma"][0],
                shot_prob=params["shot_prob"][0],
                shot_scale=(params["shot_scale"][0], params["shot_scale"][-1]),
            )
        except KeyError as missing:
            raise ValueError(f"level '{level}' is missing parameter {missing}") from None
    return table


def format_level_table(table):
    """Inverse of load_level_table, for writing default tables to disk."""
    lines = []
    for name, p in table.items():
        lines.append(f"{name}.num_blocks = {p.num_blocks[0]} {p.num_blocks[1]}")
        lines.append(f"{name}.block_side = {p.block_side[0]} {p.block_side[1]}")
        lines.append(f"{name}.gauss_sigma = {p.gauss_sigma}")
        lines.append(f"{name}.shot_prob = {p.shot_prob}")
        lines.append(f"{name}.shot_scale = {p.shot_scale[0]} {p.shot_scale[1]}")
    return "\n".join(lines) + "\n"


def block_mask(depth, level, rng):
    """Zero out randomly placed axis-aligned rectangles.

    Draw order is pinned: block count, then per block the two side
    fractions and the top-left corner. Output validity is a subset of the
    input's (masking can only remove measurements).
    """
    depth = np.asarray(depth)
    h, w = depth.shape
    out = depth.copy()
    lo, hi = level.num_blocks
    count = int(rng.integers(lo, hi, endpoint=True))
    min_dim = min(h, w)
    for _ in range(count):
        fh, fw = rng.uniform(level.block_side[0], level.block_side[1], size=2)
        side_h = min(h, max(1, int(round(fh * min_dim))))
        side_w = min(w, max(1, int(round(fw * min_dim))))
        top = int(rng.integers(0, h - side_h, endpoint=True))
        left = int(rng.integers(0, w - side_w, endpoint=True))
        out[top : top + side_h, left : left + side_w] = 0
    return out


def add_sensor_noise(depth, level, rng):
    """Depth-proportional Gaussian noise, shot outliers, 1 mm quantization.

    Valid pixel z -> z * (1 + N(0, gauss_sigma)), then with probability
    shot_prob multiplied by a uniform draw from shot_scale, quantized to
    1 mm steps and clamped to stay positive. Invalid pixels are untouched.
    Per-pixel draws cover the full grid so the stream does not depend on
    the validity pattern.
    """
    depth = np.asarray(depth)
    h, w = depth.shape
    gauss = rng.standard_normal((h, w))
    shot_hit = rng.random((h, w)) < level.shot_prob
    shot_mult = rng.uniform(level.shot_scale[0], level.shot_scale[1], size=(h, w))

    valid = validity_of(depth)
    z = depth * (1.0 + level.gauss_sigma * gauss)
    z = np.where(shot_hit, z * shot_mult, z)
    z = np.maximum(np.round(z / QUANT_STEP_M), 1.0) * QUANT_STEP_M
    return np.where(valid, z, 0.0).astype(np.float32)


def corrupt(depth, level, rng):
    """Full corruption: sensor noise first, then block dropouts."""
    return block_mask(add_sensor_noise(depth, level, rng), level, rng)
