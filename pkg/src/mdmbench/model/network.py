"""Joint RGB-D transformer with a convolutional reconstruction stack.

RGB and depth are patchified by separate linear projections onto a
shared grid; every token gets the same learnable spatial embedding for
its cell plus a modality embedding row (0 = RGB, 1 = depth). Masked
depth tokens are dropped before the encoder, so the sequence is
[cls] + all RGB tokens + surviving depth tokens.

After encoding, depth tokens are discarded; the cls token is broadcast
onto the RGB grid and a pyramid of residual blocks + 2x2 transposed
convolutions (with disc-mapped UV coordinates injected at every scale)
upsamples to 16x the grid, where a small head emits log-depth that is
bilinearly resized to the input resolution and exponentiated.

Everything runs unbatched (one sample per call): token counts vary with
the mask, and desk-scale training is loop-friendly anyway.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..core import bilinear_resize

MOD_CLS = 0
MOD_RGB = 1
MOD_DEPTH = 2


@dataclass
class TokenSequence:
    tokens: torch.Tensor    # (T, n)
    modality: torch.Tensor  # (T,) int64, MOD_* tags
    cells: torch.Tensor     # (T,) int64 flat grid cell, -1 for cls


@dataclass
class AttentionRecord:
    """Final encoder layer attention, kept per head with token tags."""

    probs: torch.Tensor     # (heads, T, T), softmax over the last axis
    modality: torch.Tensor  # (T,)
    cells: torch.Tensor     # (T,)
    grid_hw: tuple

    def depth_to_rgb(self):
        """Head-averaged (n_depth_queries, N_rgb) weights plus query cells."""
        qsel = self.modality == MOD_DEPTH
        ksel = self.modality == MOD_RGB
        w = self.probs[:, qsel][:, :, ksel].mean(dim=0)
        return w, self.cells[qsel]


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        t, n = x.shape
        qkv = self.qkv(x).reshape(t, 3, self.heads, n // self.heads)
        q, k, v = (qkv[:, i].transpose(0, 1) for i in range(3))  # (heads, t, hd)
        probs = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (probs @ v).transpose(0, 1).reshape(t, n)
        return self.proj(out), probs


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def forward(self, x):
        attn_out, probs = self.attn(self.norm1(x))
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x, probs


class Backbone(nn.Module):
    """Patch embeddings, positional tables, cls token, encoder blocks."""

    def __init__(self, cfg):
        super().__init__()
        p, n = cfg.patch, cfg.embed_dim
        # Bias-free projections: an all-zero patch embeds to the zero
        # vector, so token differences reduce to the embedding tables.
        self.rgb_patch_proj = nn.Linear(3 * p * p, n, bias=False)
        self.depth_patch_proj = nn.Linear(p * p, n, bias=False)
        self.spatial_pos_emb = nn.Parameter(torch.empty(cfg.num_tokens, n))
        self.modality_emb = nn.Parameter(torch.empty(2, n))  # rows: rgb, depth
        self.cls_token = nn.Parameter(torch.empty(1, n))
        self.blocks = nn.ModuleList(
            Block(n, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.encoder_layers)
        )
        nn.init.trunc_normal_(self.spatial_pos_emb, std=0.02)
        nn.init.trunc_normal_(self.modality_emb, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)


def _patchify(img, patch):
    """(H, W, C) or (H, W) -> (N, patch*patch*C), row-major patches."""
    if img.dim() == 2:
        img = img.unsqueeze(-1)
    h, w, c = img.shape
    gh, gw = h // patch, w // patch
    x = img.reshape(gh, patch, gw, patch, c).permute(0, 2, 1, 3, 4)
    return x.reshape(gh * gw, patch * patch * c)


def _uv_grid(h, w, dtype, device):
    """Disc-mapped UV coordinates, (2, h, w), aspect preserved.

    u, v span [-1, 1] on the longer side (shorter side proportionally
    less), then (u, v) -> (u*sqrt(1 - v^2/2), v*sqrt(1 - u^2/2)) bends
    the rectangle onto a disc.
    """
    half = max(h, w) / 2.0
    u = (torch.arange(w, dtype=dtype, device=device) + 0.5 - w / 2.0) / half
    v = (torch.arange(h, dtype=dtype, device=device) + 0.5 - h / 2.0) / half
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    du = uu * torch.sqrt(1.0 - vv**2 / 2.0)
    dv = vv * torch.sqrt(1.0 - uu**2 / 2.0)
    return torch.stack([du, dv])


class ResBlock(nn.Module):
    """Pre-activation residual block: (norm, act, 3x3 conv) twice.

    The second convolution starts at zero so the block begins as the
    identity, which keeps the randomly initialized pyramid well-scaled.
    """

    def __init__(self, ch):
        super().__init__()
        groups = math.gcd(8, ch)
        self.norm1 = nn.GroupNorm(groups, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        h = self.conv1(F.gelu(self.norm1(x)))
        return x + self.conv2(F.gelu(self.norm2(h)))


class _Stage(nn.Module):
    """UV injection followed by stacked residual blocks at one scale."""

    def __init__(self, ch, blocks=1):
        super().__init__()
        self.uv_merge = nn.Conv2d(ch + 2, ch, 1)
        self.res = nn.Sequential(*(ResBlock(ch) for _ in range(blocks)))

    def forward(self, x):
        uv = _uv_grid(x.shape[-2], x.shape[-1], x.dtype, x.device)
        x = self.uv_merge(torch.cat([x, uv.unsqueeze(0)], dim=1))
        return self.res(x)


class ConvStackDecoder(nn.Module):
    """Pyramid neck: 2x upsampling per stage from (h, w) to (2^S h, 2^S w)."""

    def __init__(self, cfg):
        super().__init__()
        chans = cfg.neck_channels()
        # tokens arrive unnormalized; a channel norm keeps the conv stack
        # insensitive to encoder output scale
        self.in_norm = nn.GroupNorm(1, cfg.embed_dim)
        self.in_proj = nn.Conv2d(cfg.embed_dim, chans[0], 1)
        self.base = _Stage(chans[0], cfg.decoder_blocks)
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(chans[s], chans[s + 1], kernel_size=2, stride=2)
            for s in range(cfg.decoder_stages)
        )
        self.stages = nn.ModuleList(
            _Stage(chans[s + 1], cfg.decoder_blocks) for s in range(cfg.decoder_stages)
        )

    def forward(self, x):
        x = self.base(self.in_proj(self.in_norm(x)))
        for up, stage in zip(self.ups, self.stages):
            x = stage(up(x))
        return x


class DepthHead(nn.Module):
    def __init__(self, ch, hidden):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 1, 3, padding=1)

    def forward(self, x):
        return self.conv2(F.gelu(self.conv1(x)))


class MdmNet(nn.Module):
    """Full network: joint encoder plus convolutional depth decoder.

    Parameters under ``backbone.`` form the low-learning-rate group for
    the optimizer's name-pattern split.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.decoder = ConvStackDecoder(cfg)
        self.head = DepthHead(cfg.neck_channels()[-1], cfg.head_hidden)

    # -- token assembly ----------------------------------------------------

    def embed_inputs(self, rgb, depth=None, token_mask=None):
        """Build the token sequence: [cls] + RGB grid + kept depth tokens.

        rgb: (H, W, 3) in [0,1]; depth: (H, W) meters with 0 = invalid,
        or None for depth-free operation; token_mask: (grid_h, grid_w) or
        flat (N,) booleans, True = drop that depth token.
        """
        cfg = self.cfg
        bb = self.backbone
        if rgb.shape[0] != cfg.image_h or rgb.shape[1] != cfg.image_w:
            raise ValueError(
                f"rgb {tuple(rgb.shape[:2])} does not match configured "
                f"{cfg.image_h}x{cfg.image_w}"
            )
        n_tok = cfg.num_tokens
        rgb_tokens = bb.rgb_patch_proj(_patchify(rgb, cfg.patch))
        rgb_tokens = rgb_tokens + bb.spatial_pos_emb + bb.modality_emb[0]

        parts = [bb.cls_token, rgb_tokens]
        modality = [
            torch.tensor([MOD_CLS]),
            torch.full((n_tok,), MOD_RGB, dtype=torch.int64),
        ]
        cells = [torch.tensor([-1]), torch.arange(n_tok)]

        if depth is not None:
            if depth.shape[0] != cfg.image_h or depth.shape[1] != cfg.image_w:
                raise ValueError("depth resolution does not match the RGB input")
            if token_mask is None:
                raise ValueError("token_mask is required when depth is given")
            mask = torch.as_tensor(np.asarray(token_mask), dtype=torch.bool).reshape(-1)
            if mask.numel() != n_tok:
                raise ValueError(f"token mask has {mask.numel()} entries, expected {n_tok}")
            keep = torch.nonzero(~mask, as_tuple=False).squeeze(-1)
            if keep.numel():
                valid = torch.isfinite(depth) & (depth > 0)
                norm = torch.where(valid, depth / cfg.depth_scale, torch.zeros_like(depth))
                patches = _patchify(norm, cfg.patch)[keep]
                d_tokens = bb.depth_patch_proj(patches)
                d_tokens = d_tokens + bb.spatial_pos_emb[keep] + bb.modality_emb[1]
                parts.append(d_tokens)
                modality.append(torch.full((keep.numel(),), MOD_DEPTH, dtype=torch.int64))
                cells.append(keep)
        return TokenSequence(
            tokens=torch.cat(parts),
            modality=torch.cat(modality),
            cells=torch.cat(cells),
        )

    def encode(self, seq):
        """Run the encoder blocks; returns the final layer only."""
        x = seq.tokens
        probs = None
        for block in self.backbone.blocks:
            x, probs = block(x)
        record = None
        if probs is not None:
            record = AttentionRecord(
                probs=probs.detach(),
                modality=seq.modality,
                cells=seq.cells,
                grid_hw=(self.cfg.grid_h, self.cfg.grid_w),
            )
        return TokenSequence(x, seq.modality, seq.cells), record

    def decode(self, seq):
        """Reconstruct depth from cls + RGB tokens (depth tokens dropped)."""
        cfg = self.cfg
        rgb_rows = seq.tokens[seq.modality == MOD_RGB]
        if rgb_rows.shape[0] != cfg.num_tokens:
            raise ValueError(
                f"decoder needs the full RGB grid ({cfg.num_tokens} tokens), "
                f"got {rgb_rows.shape[0]}"
            )
        cls = seq.tokens[0]
        x = (rgb_rows + cls).reshape(cfg.grid_h, cfg.grid_w, cfg.embed_dim)
        x = x.permute(2, 0, 1).unsqueeze(0)
        feats = self.decoder(x)
        log_depth = self.head(feats)
        log_depth = F.interpolate(
            log_depth, size=(cfg.image_h, cfg.image_w),
            mode="bilinear", align_corners=False,
        )[0, 0]
        return cfg.depth_scale * torch.exp(log_depth)

    def forward(self, rgb, depth=None, token_mask=None):
        seq = self.embed_inputs(rgb, depth, token_mask)
        latent, record = self.encode(seq)
        return self.decode(latent), record


def masked_l1_loss(pred, gt):
    """Mean absolute error over GT-valid pixels; (loss, pixel count).

    With no valid pixel the loss is a constant zero and count is 0 so the
    caller can flag the sample.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    valid = torch.isfinite(gt) & (gt > 0)
    count = int(valid.sum())
    if count == 0:
        return torch.zeros((), dtype=pred.dtype), 0
    return (pred[valid] - gt[valid]).abs().mean(), count


def build_model(cfg, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    model = MdmNet(cfg)
    return model.to(dtype)


def predict(model, rgb, depth=None, token_mask=None):
    """Numpy-facing inference wrapper; returns (depth f32, AttentionRecord)."""
    dtype = next(model.parameters()).dtype
    rgb_t = torch.as_tensor(np.ascontiguousarray(rgb), dtype=dtype)
    depth_t = None
    if depth is not None:
        depth_t = torch.as_tensor(np.ascontiguousarray(depth), dtype=dtype)
    with torch.no_grad():
        pred, record = model(rgb_t, depth_t, token_mask)
    return pred.numpy().astype(np.float32), record


def extract_attention(record, query_cell, image_hw):
    """Heatmap of one depth query's attention over the RGB grid.

    query_cell is (row, col) on the patch grid and must name a retained
    depth token. The head-averaged weights are reshaped to the grid,
    bilinearly resized to image_hw, and min-max normalized to [0, 1];
    a constant map (min == max) is returned as all zeros.
    """
    gh, gw = record.grid_hw
    r, c = query_cell
    if not (0 <= r < gh and 0 <= c < gw):
        raise ValueError(f"query cell {query_cell} outside {gh}x{gw} grid")
    flat = r * gw + c
    weights, qcells = record.depth_to_rgb()
    hits = torch.nonzero(qcells == flat, as_tuple=False).squeeze(-1)
    if hits.numel() == 0:
        raise ValueError(
            f"depth token at cell {query_cell} was masked or never embedded"
        )
    heat = weights[hits[0]].reshape(gh, gw).numpy().astype(np.float64)
    heat = bilinear_resize(heat, image_hw[0], image_hw[1])
    lo, hi = float(heat.min()), float(heat.max())
    if hi <= lo:
        return np.zeros(image_hw, dtype=np.float32)
    return ((heat - lo) / (hi - lo)).astype(np.float32)
