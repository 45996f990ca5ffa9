"""Command-line surface for the depth pipeline.

Subcommands: gen-synth, corrupt, train-toy, infer, eval, attn-vis.
Every stochastic subcommand takes --seed and is bit-reproducible; sample
work parallelizes over --threads (MDM_BENCH_THREADS as fallback) with
per-sample derived streams, so thread count never changes the output.
"""

import argparse
import csv
import io
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import dataio, degrade, metrics
from .colormap import apply_colormap, colorize_depth
from .core import bilinear_resize, nearest_resample, validity_of
from .masking import MaskingConfig, patch_validity, sample_token_mask
from .model import (
    ModelConfig,
    extract_attention,
    load_checkpoint,
    load_training_samples,
    predict,
    save_checkpoint,
    toy_config,
    train_loop,
)
from .rng import derive_rng

METRICS_CSV_VERSION = "# mdmbench-metrics-v1"
LOSS_CSV_VERSION = "# mdmbench-loss-v1"


class CliError(Exception):
    """User-facing failure reported as a one-line diagnostic."""


def _thread_count(args):
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("MDM_BENCH_THREADS")
    return max(1, int(env)) if env else 1


def _parse_hw(text):
    h, w = (int(v) for v in text.lower().split("x"))
    return h, w


def _load_levels(args):
    table = degrade.default_levels()
    if getattr(args, "level_table", None):
        table = degrade.load_level_table(args.level_table)
    return table


# ---------------------------------------------------------------------------
# gen-synth
# ---------------------------------------------------------------------------


def cmd_gen_synth(args):
    os.makedirs(args.out, exist_ok=True)
    rgb_hw = _parse_hw(args.rgb_size)
    stereo_hw = _parse_hw(args.stereo_size)

    def one(i):
        sample_id = f"sample_{i:05d}"
        dataio.generate_sample(
            os.path.join(args.out, sample_id), sample_id,
            seed=args.seed + i, rgb_hw=rgb_hw, stereo_hw=stereo_hw,
        )
        return sample_id

    workers = _thread_count(args)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, range(args.count)))
    else:
        for i in range(args.count):
            one(i)

    dirs = dataio.list_sample_dirs(args.out)
    counts, edges, ratios = dataio.dataset_mask_histogram(dirs)
    hist_path = os.path.join(args.out, "mask_histogram.csv")
    buf = io.StringIO()
    buf.write("# mdmbench-mask-histogram-v1\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin_lo", "bin_hi", "count"])
    for i, c in enumerate(counts):
        writer.writerow([f"{edges[i]:.2f}", f"{edges[i + 1]:.2f}", int(c)])
    dataio.atomic_write_bytes(hist_path, buf.getvalue().encode("utf-8"))
    print(f"wrote {len(dirs)} samples and {os.path.basename(hist_path)} to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# corrupt
# ---------------------------------------------------------------------------


def _corrupt_one(in_path, out_path, level_params, seed, stream):
    depth, _ = dataio.read_dmap(in_path, dataio.KIND_DEPTH)
    out = degrade.corrupt(depth, level_params, derive_rng(seed, stream))
    dataio.write_dmap(out_path, out, dataio.KIND_DEPTH)


def cmd_corrupt(args):
    table = _load_levels(args)
    if args.level not in table:
        raise CliError(f"unknown level {args.level!r}; have {sorted(table)}")
    params = table[args.level]

    if os.path.isdir(args.input):
        dirs = dataio.list_sample_dirs(args.input)
        if not dirs:
            raise CliError(f"no samples under {args.input}")
        jobs = []
        for i, d in enumerate(dirs):
            manifest = dataio.read_manifest(d)
            src = os.path.join(d, manifest.files["perfect_depth"])
            dst = os.path.join(d, f"depth_{args.level}.dmap")
            jobs.append((src, dst, params, args.seed, i))
        workers = _thread_count(args)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(lambda j: _corrupt_one(*j), jobs))
        else:
            for j in jobs:
                _corrupt_one(*j)
        print(f"corrupted {len(jobs)} samples at level {args.level}")
    else:
        out = args.out or f"{os.path.splitext(args.input)[0]}_{args.level}.dmap"
        _corrupt_one(args.input, out, params, args.seed, 0)
        print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# train-toy
# ---------------------------------------------------------------------------


def _write_loss_csv(path, trace):
    buf = io.StringIO()
    buf.write(LOSS_CSV_VERSION + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss", "lr_backbone", "lr_rest", "grad_norm"])
    for rec in trace:
        writer.writerow(
            [rec.step, f"{rec.loss:.8e}", f"{rec.lr_backbone:.8e}",
             f"{rec.lr_rest:.8e}", f"{rec.grad_norm:.8e}"]
        )
    dataio.atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def cmd_train_toy(args):
    import torch

    # Toy tensors are tiny; intra-op threading only adds overhead.
    torch.set_num_threads(_thread_count(args))
    samples = load_training_samples(args.data)
    crop = args.crop
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = ModelConfig.from_json(fh.read())
    else:
        cfg = toy_config(image_h=crop, image_w=crop)

    model = opt_state = None
    start_step = 0
    if args.resume:
        model, opt_state, start_step = load_checkpoint(args.resume)
        cfg = model.cfg
    result = train_loop(
        samples, cfg, steps=args.steps, seed=args.seed,
        batch_size=args.batch_size, base_backbone=args.lr_backbone,
        base_rest=args.lr, warmup=args.warmup, decay_every=args.decay_every,
        decay=args.decay, clip_norm=args.clip_norm, augment=not args.no_aug,
        model=model, opt_state=opt_state, start_step=start_step,
    )
    save_checkpoint(args.ckpt_out, result.model, opt_state=result.opt_state,
                    step=start_step + args.steps)
    loss_csv = args.loss_csv or f"{os.path.splitext(args.ckpt_out)[0]}_loss.csv"
    _write_loss_csv(loss_csv, result.trace)
    first, last = result.trace[0].loss, result.trace[-1].loss
    print(f"trained {args.steps} steps: loss {first:.4f} -> {last:.4f}; "
          f"checkpoint {args.ckpt_out}")
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def _infer_token_mask(depth_small, cfg, mask_ratio, seed):
    pv = patch_validity(validity_of(depth_small), cfg.patch)
    if mask_ratio is None:
        # Completion mode: drop exactly the fully-hollow tokens.
        return pv == 0.0
    mcfg = MaskingConfig(patch=cfg.patch)
    return sample_token_mask(pv, mask_ratio, mcfg, derive_rng(seed, 0))


def cmd_infer(args):
    if args.mask_ratio is not None and args.seed is None:
        raise CliError("--mask-ratio sampling requires --seed")
    model, _, _ = load_checkpoint(args.ckpt)
    cfg = model.cfg
    rgb = dataio.read_png(args.rgb)
    in_h, in_w = rgb.shape[:2]
    rgb_net = np.clip(bilinear_resize(rgb, cfg.image_h, cfg.image_w), 0.0, 1.0)

    depth_net = token_mask = None
    if args.depth:
        depth, _ = dataio.read_dmap(args.depth, dataio.KIND_DEPTH)
        if depth.shape != (in_h, in_w):
            raise CliError("depth resolution differs from the RGB image")
        depth_net = nearest_resample(depth, cfg.image_h, cfg.image_w)
        token_mask = _infer_token_mask(depth_net, cfg, args.mask_ratio, args.seed or 0)

    pred_net, _ = predict(model, rgb_net, depth_net, token_mask)
    pred = bilinear_resize(pred_net, in_h, in_w).astype(np.float32)
    dataio.write_dmap(args.out_dmap, pred, dataio.KIND_DEPTH)
    if args.out_png:
        dataio.write_png(args.out_png, colorize_depth(pred) / 255.0)
    mode = "completion" if args.depth else "monocular"
    print(f"{mode} prediction {pred.shape[0]}x{pred.shape[1]} -> {args.out_dmap}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args):
    pred, _ = dataio.read_dmap(args.pred, dataio.KIND_DEPTH)
    gt, _ = dataio.read_dmap(args.gt, dataio.KIND_DEPTH)
    aligned = metrics.align(pred, gt, args.align)
    report = metrics.depth_metrics(aligned, gt)
    buf = io.StringIO()
    buf.write(METRICS_CSV_VERSION + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample", "mode", "rmse", "mae", "rel", "delta1", "valid_count"])
    sample_id = os.path.splitext(os.path.basename(args.pred))[0]
    writer.writerow(
        [sample_id, args.align, f"{report.rmse:.6f}", f"{report.mae:.6f}",
         f"{report.rel:.6f}", f"{report.delta1:.6f}", report.valid_count]
    )
    text = buf.getvalue()
    if args.out:
        dataio.atomic_write_bytes(args.out, text.encode("utf-8"))
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# attn-vis
# ---------------------------------------------------------------------------


def cmd_attn_vis(args):
    model, _, _ = load_checkpoint(args.ckpt)
    cfg = model.cfg
    manifest = dataio.read_manifest(args.sample)
    rgb = dataio.read_png(os.path.join(args.sample, manifest.files["rgb"]))
    depth, _ = dataio.read_dmap(
        os.path.join(args.sample, manifest.files["sensor_depth"]), dataio.KIND_DEPTH
    )
    in_h, in_w = rgb.shape[:2]
    rgb_net = np.clip(bilinear_resize(rgb, cfg.image_h, cfg.image_w), 0.0, 1.0)
    depth_net = nearest_resample(depth, cfg.image_h, cfg.image_w)

    r, c = (int(v) for v in args.query.split(","))
    token_mask = _infer_token_mask(depth_net, cfg, args.mask_ratio, args.seed or 0)
    flat = r * cfg.grid_w + c
    if not (0 <= r < cfg.grid_h and 0 <= c < cfg.grid_w):
        raise CliError(f"query {r},{c} outside {cfg.grid_h}x{cfg.grid_w} grid")
    if token_mask.reshape(-1)[flat]:
        raise CliError(f"depth token at {r},{c} is masked; pick a retained one")

    _, record = predict(model, rgb_net, depth_net, token_mask)
    if record is None:
        raise CliError("checkpoint has no encoder layers to visualize")
    heat = extract_attention(record, (r, c), (cfg.image_h, cfg.image_w))
    heat_full = np.clip(bilinear_resize(heat, in_h, in_w), 0.0, 1.0)
    overlay = 0.5 * rgb + 0.5 * apply_colormap(heat_full).astype(np.float64) / 255.0
    dataio.write_png(args.out, overlay)
    print(f"attention overlay for query ({r},{c}) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mdmbench",
        description="Synthetic RGB-D pipeline: data generation, corruption, "
                    "training, inference, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="render a synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rgb-size", default="960x1280", help="HxW, default 960x1280")
    p.add_argument("--stereo-size", default="720x960", help="HxW, default 720x960")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("corrupt", help="apply block masking + sensor noise")
    p.add_argument("--in", dest="input", required=True,
                   help="dataset directory or a single depth .dmap")
    p.add_argument("--level", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None, help="output path (single-file mode)")
    p.add_argument("--level-table", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train-toy", help="train the toy completion model")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", default=None, help="ModelConfig JSON path")
    p.add_argument("--ckpt-out", required=True)
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--crop", type=int, default=56)
    # Toy-scale optimizer defaults; the full-scale recipe values live in
    # model.optim and stay untouched.
    p.add_argument("--lr", type=float, default=3e-3,
                   help="learning rate for non-backbone parameters")
    p.add_argument("--lr-backbone", type=float, default=3e-4)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--decay-every", type=int, default=250)
    p.add_argument("--decay", type=float, default=0.5)
    p.add_argument("--clip-norm", type=float, default=10.0)
    p.add_argument("--no-aug", action="store_true")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("infer", help="predict depth from RGB (+ optional depth)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth", default=None)
    p.add_argument("--mask-ratio", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dmap", required=True)
    p.add_argument("--out-png", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="depth metrics with optional alignment")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--align", default="none", choices=metrics.ALIGN_MODES)
    p.add_argument("--out", default=None, help="CSV path; stdout if omitted")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn-vis", help="depth-query attention overlay PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True, help="sample directory")
    p.add_argument("--query", required=True, help="row,col on the patch grid")
    p.add_argument("--mask-ratio", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_vis)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
