"""Versioned binary checkpoints, byte-stable across platforms.

Layout (all little-endian):

    magic  b"MDMC"
    u16    format version (1)
    u32    metadata length, then that many bytes of UTF-8 JSON
    u32    tensor count
    per tensor, in sorted-name order:
        u16  name length, then UTF-8 name
        u8   ndim, then ndim * u32 dims
        float32 payload, C order

Metadata carries the model configuration, the training step, and
whether optimizer moments are included (stored as extra tensors named
``opt.m/<param>`` and ``opt.v/<param>``).
"""

import json
import struct

import numpy as np
import torch

from ..dataio import atomic_write_bytes
from .config import ModelConfig
from .network import MdmNet
from .optim import AdamState

CKPT_MAGIC = b"MDMC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_tensors(tensors):
    out = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(path, model, opt_state=None, step=0):
    """Persist model parameters (and optionally Adam moments) to disk."""
    tensors = {k: p.detach().cpu().numpy() for k, p in model.named_parameters()}
    meta = {
        "config": json.loads(model.cfg.to_json()),
        "step": int(step),
        "has_opt": opt_state is not None,
    }
    if opt_state is not None:
        meta["opt_step"] = int(opt_state.step)
        for k, t in opt_state.m.items():
            tensors[f"opt.m/{k}"] = t.cpu().numpy()
        for k, t in opt_state.v.items():
            tensors[f"opt.v/{k}"] = t.cpu().numpy()
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = (
        CKPT_MAGIC
        + struct.pack("<H", CKPT_VERSION)
        + struct.pack("<I", len(meta_raw))
        + meta_raw
        + _pack_tensors(tensors)
    )
    atomic_write_bytes(path, payload)


def _unpack_tensors(raw, offset):
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + nlen].decode("utf-8")
        offset += nlen
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += size * 4
        tensors[name] = arr.copy()
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes in checkpoint")
    return tensors


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild (model, opt_state_or_None, step) from a checkpoint file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 6)
    meta = json.loads(raw[10 : 10 + meta_len].decode("utf-8"))
    tensors = _unpack_tensors(raw, 10 + meta_len)

    cfg = ModelConfig.from_json(json.dumps(meta["config"]))
    model = MdmNet(cfg).to(dtype)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise CheckpointError(f"{path}: missing parameter {name!r}")
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: shape mismatch for {name!r}")
            p.copy_(torch.from_numpy(tensors[name]))

    opt_state = None
    if meta.get("has_opt"):
        params = dict(model.named_parameters())
        opt_state = AdamState(step=int(meta["opt_step"]))
        for k in params:
            opt_state.m[k] = torch.from_numpy(tensors[f"opt.m/{k}"]).to(dtype)
            opt_state.v[k] = torch.from_numpy(tensors[f"opt.v/{k}"]).to(dtype)
    return model, opt_state, int(meta["step"])
