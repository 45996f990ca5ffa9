"""Decoupled-weight-decay Adam with the two-group learning-rate schedule.

Parameters whose names match ``*backbone*`` form the low-learning-rate
group (warmed up linearly from zero); everything else starts at its full
rate immediately. Both groups step-decay by 0.5 every 25k iterations,
counted from iteration 0. Gradients are clipped to a global norm before
every update.
"""

import math
from dataclasses import dataclass, field
from fnmatch import fnmatch

import torch

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
WEIGHT_DECAY = 0.05
CLIP_NORM = 1.0
BACKBONE_PATTERN = "*backbone*"

BASE_LR_BACKBONE = 1e-5
BASE_LR_REST = 1e-4
WARMUP_ITERS = 2000
DECAY_EVERY = 25000
DECAY_FACTOR = 0.5


def lr_at(step, base_backbone=BASE_LR_BACKBONE, base_rest=BASE_LR_REST,
          warmup=WARMUP_ITERS, decay_every=DECAY_EVERY, decay=DECAY_FACTOR):
    """(backbone_lr, rest_lr) at a given iteration.

    The backbone rate ramps linearly from zero over `warmup` iterations;
    the rest starts at its target immediately. Both decay by `decay`
    every `decay_every` iterations, counted from iteration 0.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    scale = decay ** (step // decay_every)
    ramp = 1.0 if warmup <= 0 else min(step / warmup, 1.0)
    return base_backbone * ramp * scale, base_rest * scale


def clip_gradients(grads, max_norm=CLIP_NORM):
    """Scale all gradients in place to a global L2 norm cap.

    Returns the pre-clip norm. A zero/empty gradient set is left alone.
    """
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g.mul_(scale)
    return total


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam_state(params):
    return AdamState(
        step=0,
        m={k: torch.zeros_like(p) for k, p in params.items()},
        v={k: torch.zeros_like(p) for k, p in params.items()},
    )


def is_backbone(name, pattern=BACKBONE_PATTERN):
    return fnmatch(name, pattern)


@torch.no_grad()
def adamw_step(params, grads, state, lr_backbone, lr_rest,
               betas=(BETA1, BETA2), eps=EPS, weight_decay=WEIGHT_DECAY,
               clip_norm=CLIP_NORM, backbone_pattern=BACKBONE_PATTERN):
    """One in-place update over named parameter tensors.

    Standard bias-corrected Adam with decoupled weight decay
    (p -= lr * wd * p), applied after clipping the gradient set to
    `clip_norm`. Returns the pre-clip gradient norm.
    """
    for name, p in params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient/parameter shape mismatch for {name!r}")
        if name not in state.m:
            raise ValueError(f"optimizer state missing entry for {name!r}")

    grad_norm = clip_gradients(grads, clip_norm)
    state.step += 1
    t = state.step
    b1, b2 = betas
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        lr = lr_backbone if is_backbone(name, backbone_pattern) else lr_rest
        m = state.m[name]
        v = state.v[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m / bc1, denom, value=-lr)
    return grad_norm
