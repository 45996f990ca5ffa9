"""Seeded training loop: natural-mask sampling, masked L1, AdamW schedule.

Each step draws its own Philox stream keyed by (seed, step), so runs are
reproducible and a resumed run replays the exact draws of the steps it
continues. Augmentation at desk scale is horizontal flip plus a random
resized crop.
"""

import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .. import dataio
from ..core import bilinear_resize, nearest_resample, validity_of
from ..masking import MaskingConfig, patch_validity, sample_mask_ratio, sample_token_mask
from ..rng import derive_rng
from . import optim as opt
from .network import build_model, masked_l1_loss


class TrainingDiverged(RuntimeError):
    def __init__(self, step, trace):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.trace = trace


@dataclass
class TrainSample:
    rgb: np.ndarray           # (H, W, 3) in [0,1]
    sensor_depth: np.ndarray  # (H, W) network input, holes = 0
    gt_depth: np.ndarray      # (H, W) supervision target


@dataclass
class StepRecord:
    step: int
    loss: float
    lr_backbone: float
    lr_rest: float
    grad_norm: float


@dataclass
class TrainResult:
    model: object
    opt_state: opt.AdamState
    trace: list = field(default_factory=list)


def load_training_samples(dataset_dir):
    """Read every sample directory into memory (desk-scale datasets)."""
    samples = []
    for d in dataio.list_sample_dirs(dataset_dir):
        manifest = dataio.read_manifest(d)
        rgb = dataio.read_png(os.path.join(d, manifest.files["rgb"]))
        sensor, _ = dataio.read_dmap(
            os.path.join(d, manifest.files["sensor_depth"]), dataio.KIND_DEPTH
        )
        gt, _ = dataio.read_dmap(
            os.path.join(d, manifest.files["perfect_depth"]), dataio.KIND_DEPTH
        )
        samples.append(TrainSample(rgb, sensor, gt))
    if not samples:
        raise ValueError(f"no samples found under {dataset_dir}")
    return samples


def augment_sample(sample, out_hw, rng, enable=True):
    """Horizontal flip + random resized crop to out_hw.

    Depth maps are resampled nearest so invalid zeros never bleed into
    valid neighbors; metric values are left untouched (cropping does not
    change distances).
    """
    out_h, out_w = out_hw
    rgb, sensor, gt = sample.rgb, sample.sensor_depth, sample.gt_depth
    h, w = gt.shape
    if enable:
        if rng.random() < 0.5:
            rgb, sensor, gt = rgb[:, ::-1], sensor[:, ::-1], gt[:, ::-1]
        scale = float(rng.uniform(0.6, 1.0))
        region_h = min(h, max(1, int(round(scale * h))))
        region_w = min(w, max(1, int(round(scale * w))))
        top = int(rng.integers(0, h - region_h, endpoint=True))
        left = int(rng.integers(0, w - region_w, endpoint=True))
        rgb = rgb[top : top + region_h, left : left + region_w]
        sensor = sensor[top : top + region_h, left : left + region_w]
        gt = gt[top : top + region_h, left : left + region_w]
    out_rgb = np.clip(bilinear_resize(np.ascontiguousarray(rgb), out_h, out_w), 0.0, 1.0)
    return TrainSample(
        rgb=out_rgb.astype(np.float32),
        sensor_depth=nearest_resample(np.ascontiguousarray(sensor), out_h, out_w),
        gt_depth=nearest_resample(np.ascontiguousarray(gt), out_h, out_w),
    )


def _batch_indices(rng, n_samples, batch_size):
    """Batch sampling: tile the whole set, then top up without replacement.

    For batch sizes at or above the dataset size every sample appears the
    same number of times (plus a random remainder), which keeps small
    overfitting runs from randomly starving a sample.
    """
    reps = batch_size // n_samples
    idx = np.tile(np.arange(n_samples), reps)
    rem = batch_size - reps * n_samples
    if rem:
        idx = np.concatenate([idx, rng.choice(n_samples, size=rem, replace=False)])
    return idx


def batch_loss(model, batch, mask_cfg, rng):
    """Forward the batch with freshly sampled token masks; mean sample loss.

    Samples without any valid GT pixel are skipped; if the whole batch is
    empty the loss is a detached zero.
    """
    dtype = next(model.parameters()).dtype
    losses = []
    for sample in batch:
        pv = patch_validity(validity_of(sample.sensor_depth), mask_cfg.patch)
        ratio = sample_mask_ratio(mask_cfg, rng)
        token_mask = sample_token_mask(pv, ratio, mask_cfg, rng)
        rgb_t = torch.as_tensor(sample.rgb, dtype=dtype)
        dep_t = torch.as_tensor(sample.sensor_depth, dtype=dtype)
        gt_t = torch.as_tensor(sample.gt_depth, dtype=dtype)
        pred, _ = model(rgb_t, dep_t, token_mask)
        loss, count = masked_l1_loss(pred, gt_t)
        if count:
            losses.append(loss)
    if not losses:
        return torch.zeros((), dtype=dtype)
    return torch.stack(losses).mean()


def gradients(model, batch, mask_cfg, rng):
    """Reverse-mode gradients of the batch loss w.r.t. every parameter.

    Parameters outside the compute graph (e.g. the depth projection when
    every depth token is masked) get zero gradients. Raises
    TrainingDiverged upstream semantics via a non-finite check here.
    """
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch, mask_cfg, rng)
    if loss.requires_grad:
        loss.backward()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    grads = {}
    for name, p in model.named_parameters():
        grads[name] = (
            p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        )
    return grads, float(loss.detach())


def train_loop(samples, cfg, steps, seed, batch_size=8,
               base_backbone=opt.BASE_LR_BACKBONE, base_rest=opt.BASE_LR_REST,
               warmup=opt.WARMUP_ITERS, decay_every=opt.DECAY_EVERY,
               decay=opt.DECAY_FACTOR, weight_decay=opt.WEIGHT_DECAY,
               clip_norm=opt.CLIP_NORM, mask_cfg=None, augment=True,
               dtype=torch.float32, model=None, opt_state=None, start_step=0):
    """Run `steps` optimization steps; returns model, state, and the trace.

    Pass model/opt_state/start_step to continue a previous run: because
    per-step randomness is keyed by (seed, step index), the continuation
    replays exactly what an uninterrupted run would have done.
    """
    if mask_cfg is None:
        mask_cfg = MaskingConfig(patch=cfg.patch)
    if model is None:
        model = build_model(cfg, seed=seed, dtype=dtype)
    params = dict(model.named_parameters())
    if opt_state is None:
        opt_state = opt.init_adam_state(params)

    trace = []
    for step in range(start_step, start_step + steps):
        rng = derive_rng(seed, step)
        idx = _batch_indices(rng, len(samples), batch_size)
        batch = [
            augment_sample(samples[i], (cfg.image_h, cfg.image_w), rng, enable=augment)
            for i in idx
        ]
        try:
            grads, loss = gradients(model, batch, mask_cfg, rng)
        except FloatingPointError:
            raise TrainingDiverged(step, trace) from None
        lr_b, lr_r = opt.lr_at(step, base_backbone, base_rest, warmup, decay_every, decay)
        norm = opt.adamw_step(
            params, grads, opt_state, lr_b, lr_r,
            weight_decay=weight_decay, clip_norm=clip_norm,
        )
        trace.append(StepRecord(step, loss, lr_b, lr_r, norm))
    return TrainResult(model=model, opt_state=opt_state, trace=trace)
