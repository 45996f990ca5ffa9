import numpy as np
import pytest
import torch

from mdmbench.masking import MaskingConfig
from mdmbench.model import (
    MOD_DEPTH,
    MOD_RGB,
    AttentionRecord,
    ModelConfig,
    TrainSample,
    adamw_step,
    build_model,
    extract_attention,
    init_adam_state,
    lr_at,
    masked_l1_loss,
    train_loop,
)
from mdmbench.model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from mdmbench.model.network import Block, TokenSequence
from mdmbench.model.optim import clip_gradients
from mdmbench.model.train import TrainingDiverged, augment_sample, batch_loss, gradients
from mdmbench.rng import derive_rng, make_rng


def tiny_cfg(**overrides):
    kwargs = dict(patch=14, image_h=28, image_w=28, embed_dim=32,
                  encoder_layers=2, heads=2, decoder_stages=2, head_hidden=8)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def tiny_inputs(seed=0, h=28, w=28, dtype=torch.float32):
    rng = make_rng(seed)
    rgb = torch.tensor(rng.random((h, w, 3)), dtype=dtype)
    depth = torch.tensor(rng.uniform(0.5, 5.0, (h, w)), dtype=dtype)
    return rgb, depth


def random_sample(seed=0, h=28, w=28, hole_frac=0.3):
    rng = make_rng(seed)
    rgb = rng.random((h, w, 3)).astype(np.float32)
    gt = rng.uniform(0.5, 6.0, (h, w)).astype(np.float32)
    sensor = gt.copy()
    sensor[rng.random((h, w)) < hole_frac] = 0.0
    return TrainSample(rgb, sensor, gt)


# -- embedding ---------------------------------------------------------------


def test_embed_all_masked_leaves_cls_plus_rgb():
    model = build_model(tiny_cfg(), seed=0)
    rgb, depth = tiny_inputs()
    seq = model.embed_inputs(rgb, depth, np.ones((2, 2), bool))
    assert seq.tokens.shape[0] == 1 + 4
    assert (seq.modality == MOD_DEPTH).sum() == 0


def test_embed_none_masked_counts():
    model = build_model(tiny_cfg(), seed=0)
    rgb, depth = tiny_inputs()
    seq = model.embed_inputs(rgb, depth, np.zeros((2, 2), bool))
    assert seq.tokens.shape[0] == 1 + 2 * 4
    assert (seq.modality == MOD_RGB).sum() == 4
    assert (seq.modality == MOD_DEPTH).sum() == 4


def test_embed_zero_patches_differ_by_modality_rows():
    # bias-free projections: zero inputs embed to pos + modality rows only
    model = build_model(tiny_cfg(), seed=1)
    rgb = torch.zeros(28, 28, 3)
    depth = torch.zeros(28, 28)  # all invalid -> normalized zeros
    seq = model.embed_inputs(rgb, depth, np.zeros((2, 2), bool))
    rgb_tok = seq.tokens[1:5]
    dep_tok = seq.tokens[5:9]
    diff = rgb_tok - dep_tok
    expect = model.backbone.modality_emb[0] - model.backbone.modality_emb[1]
    assert torch.allclose(diff, expect.expand_as(diff), atol=1e-7)


def test_embed_token_count_for_random_masks():
    model = build_model(tiny_cfg(image_h=56, image_w=56), seed=0)
    rgb, depth = tiny_inputs(h=56, w=56)
    rng = make_rng(17)
    n = 16
    for _ in range(20):
        mask = rng.random((4, 4)) < rng.random()
        seq = model.embed_inputs(rgb, depth, mask)
        assert seq.tokens.shape[0] == 1 + n + (n - int(mask.sum()))


def test_embed_rejects_mismatched_inputs():
    model = build_model(tiny_cfg(), seed=0)
    rgb, depth = tiny_inputs()
    with pytest.raises(ValueError):
        model.embed_inputs(torch.zeros(42, 42, 3))
    with pytest.raises(ValueError):
        model.embed_inputs(rgb, torch.zeros(42, 42), np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        model.embed_inputs(rgb, depth, np.zeros((3, 3), bool))
    with pytest.raises(ValueError):
        model.embed_inputs(rgb, depth, None)


# -- encoder -----------------------------------------------------------------


def test_encode_zero_layers_is_identity():
    model = build_model(tiny_cfg(encoder_layers=0), seed=0)
    rgb, depth = tiny_inputs()
    seq = model.embed_inputs(rgb, depth, np.zeros((2, 2), bool))
    latent, record = model.encode(seq)
    assert torch.equal(latent.tokens, seq.tokens)
    assert record is None


def test_encode_preserves_count_and_finiteness():
    model = build_model(tiny_cfg(), seed=0)
    rgb, depth = tiny_inputs()
    seq = model.embed_inputs(rgb, depth, np.zeros((2, 2), bool))
    latent, record = model.encode(seq)
    assert latent.tokens.shape == seq.tokens.shape
    assert torch.isfinite(latent.tokens).all()
    assert record.probs.shape[1] == seq.tokens.shape[0]


def test_encoder_block_is_permutation_equivariant():
    torch.manual_seed(3)
    block = Block(16, 4, 2.0).to(torch.float64)
    x = torch.randn(8, 16, dtype=torch.float64)
    perm = torch.randperm(8)
    out, _ = block(x)
    out_perm, _ = block(x[perm])
    assert torch.allclose(out[perm], out_perm, atol=1e-12)


def test_attention_rows_sum_to_one():
    model = build_model(tiny_cfg(), seed=0)
    rgb, depth = tiny_inputs()
    _, record = model(rgb, depth, np.zeros((2, 2), bool))
    sums = record.probs.sum(dim=-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)


# -- decoder -----------------------------------------------------------------


def test_decode_output_dims_match_input():
    for hw in ((28, 28), (56, 42)):
        cfg = tiny_cfg(image_h=hw[0], image_w=hw[1], decoder_stages=4)
        model = build_model(cfg, seed=0)
        rgb, depth = tiny_inputs(h=hw[0], w=hw[1])
        mask = np.zeros((cfg.grid_h, cfg.grid_w), bool)
        pred, _ = model(rgb, depth, mask)
        assert pred.shape == (hw[0], hw[1])


def test_decode_strictly_positive_finite():
    model = build_model(tiny_cfg(), seed=7)
    rgb, depth = tiny_inputs(seed=7)
    pred, _ = model(rgb, depth, np.zeros((2, 2), bool))
    assert torch.isfinite(pred).all()
    assert (pred > 0).all()


def test_decoder_stage_dims_double_per_stage():
    cfg = tiny_cfg(decoder_stages=3)
    model = build_model(cfg, seed=0)
    sizes = []
    for stage in model.decoder.stages:
        stage.register_forward_hook(
            lambda m, inp, out: sizes.append(tuple(out.shape[-2:]))
        )
    rgb, depth = tiny_inputs()
    model(rgb, depth, np.zeros((2, 2), bool))
    assert sizes == [(4, 4), (8, 8), (16, 16)]  # 2^s * (2, 2)


def test_decode_requires_full_grid():
    model = build_model(tiny_cfg(), seed=0)
    rgb, depth = tiny_inputs()
    seq = model.embed_inputs(rgb, depth, np.zeros((2, 2), bool))
    latent, _ = model.encode(seq)
    truncated = TokenSequence(  # cls + only 2 of the 4 RGB tokens
        latent.tokens[:3], latent.modality[:3], latent.cells[:3]
    )
    with pytest.raises(ValueError):
        model.decode(truncated)


def test_decoder_consumes_same_tokens_regardless_of_mask():
    # the decoder sees exactly cls + the RGB grid for any mask choice
    model = build_model(tiny_cfg(), seed=0)
    rgb, depth = tiny_inputs()
    for mask in (np.zeros((2, 2), bool), np.eye(2, dtype=bool), np.ones((2, 2), bool)):
        seq = model.embed_inputs(rgb, depth, mask)
        rgb_rows = (seq.modality == MOD_RGB).sum()
        assert rgb_rows == 4


# -- forward -----------------------------------------------------------------


def test_forward_deterministic():
    model = build_model(tiny_cfg(), seed=0)
    rgb, depth = tiny_inputs()
    mask = np.eye(2, dtype=bool)
    a, _ = model(rgb, depth, mask)
    b, _ = model(rgb, depth, mask)
    assert torch.equal(a, b)


def test_forward_full_mask_equals_no_depth_path():
    model = build_model(tiny_cfg(), seed=0)
    rgb, depth = tiny_inputs()
    masked, rec_a = model(rgb, depth, np.ones((2, 2), bool))
    no_depth, rec_b = model(rgb, None, None)
    assert torch.equal(masked, no_depth)
    assert torch.equal(rec_a.probs, rec_b.probs)


# -- loss --------------------------------------------------------------------


def test_masked_l1_zero_for_equal():
    gt = torch.rand(6, 6) + 0.5
    loss, count = masked_l1_loss(gt.clone(), gt)
    assert loss.item() == 0.0
    assert count == 36


def test_masked_l1_all_invalid_flagged():
    pred = torch.rand(4, 4)
    loss, count = masked_l1_loss(pred, torch.zeros(4, 4))
    assert count == 0
    assert loss.item() == 0.0


def test_masked_l1_constant_offset():
    gt = torch.rand(5, 5) + 1.0
    loss, _ = masked_l1_loss(gt + 0.5, gt)
    assert loss.item() == pytest.approx(0.5, rel=1e-6)


def test_masked_l1_only_valid_pixels_count():
    gt = torch.tensor([[1.0, 0.0], [2.0, 0.0]])
    pred = torch.tensor([[1.5, 9.0], [2.5, 9.0]])
    loss, count = masked_l1_loss(pred, gt)
    assert count == 2
    assert loss.item() == pytest.approx(0.5)


def test_masked_l1_shape_mismatch():
    with pytest.raises(ValueError):
        masked_l1_loss(torch.ones(2, 2), torch.ones(2, 3))


# -- gradients ---------------------------------------------------------------


def test_gradients_zero_valid_batch_all_zero():
    model = build_model(tiny_cfg(), seed=0)
    sample = random_sample(0)
    sample.gt_depth[:] = 0.0
    grads, loss = gradients(model, [sample], MaskingConfig(patch=14), derive_rng(0, 0))
    assert loss == 0.0
    assert all(torch.all(g == 0) for g in grads.values())


def test_gradients_dead_path_when_all_depth_masked():
    model = build_model(tiny_cfg(), seed=0)
    sample = random_sample(1)
    sample.sensor_depth[:] = 0.0  # every patch fully invalid -> all masked
    grads, _ = gradients(model, [sample], MaskingConfig(patch=14), derive_rng(1, 0))
    assert torch.all(grads["backbone.depth_patch_proj.weight"] == 0)
    assert not torch.all(grads["backbone.rgb_patch_proj.weight"] == 0)


def test_gradients_match_finite_differences_spot_check():
    cfg = tiny_cfg()
    model = build_model(cfg, seed=2, dtype=torch.float64)
    sample = random_sample(2)
    mcfg = MaskingConfig(patch=14)
    grads, _ = gradients(model, [sample], mcfg, derive_rng(3, 0))
    params = dict(model.named_parameters())
    rng = make_rng(4)
    names = sorted(params)
    errs = []
    for _ in range(25):
        name = names[int(rng.integers(len(names)))]
        flat = params[name].detach().reshape(-1)
        j = int(rng.integers(flat.numel()))
        eps = 1e-3
        with torch.no_grad():
            orig = flat[j].item()
            flat[j] = orig + eps
            lp = float(batch_loss(model, [sample], mcfg, derive_rng(3, 0)))
            flat[j] = orig - eps
            lm = float(batch_loss(model, [sample], mcfg, derive_rng(3, 0)))
            flat[j] = orig
        fd = (lp - lm) / (2 * eps)
        an = grads[name].reshape(-1)[j].item()
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    assert np.median(errs) < 1e-4
    assert max(errs) < 1e-2


# -- optimizer ---------------------------------------------------------------


def test_adamw_zero_grad_zero_decay_is_noop():
    params = {"decoder.w": torch.tensor([1.0, -2.0])}
    state = init_adam_state(params)
    adamw_step(params, {"decoder.w": torch.zeros(2)}, state, 0.1, 0.1,
               weight_decay=0.0)
    assert torch.equal(params["decoder.w"], torch.tensor([1.0, -2.0]))


def test_adamw_first_step_closed_form():
    params = {"decoder.w": torch.tensor([1.0])}
    state = init_adam_state(params)
    adamw_step(params, {"decoder.w": torch.tensor([1.0])}, state, 0.1, 0.1,
               weight_decay=0.0, clip_norm=0.0)
    # bias-corrected first step: -lr * g / (|g| + eps) ~ -0.1
    assert params["decoder.w"].item() == pytest.approx(0.9, abs=1e-6)


def test_adamw_clips_global_norm_before_update():
    params = {"decoder.w": torch.tensor([0.0])}
    state = init_adam_state(params)
    norm = adamw_step(params, {"decoder.w": torch.tensor([10.0])}, state, 0.1, 0.1,
                      weight_decay=0.0, clip_norm=1.0)
    assert norm == pytest.approx(10.0)
    # first moment sees the clipped gradient: 0.1 * 1.0
    assert state.m["decoder.w"].item() == pytest.approx(0.1, rel=1e-6)


def test_adamw_weight_decay_decoupled():
    params = {"decoder.w": torch.tensor([2.0])}
    state = init_adam_state(params)
    adamw_step(params, {"decoder.w": torch.zeros(1)}, state, 0.5, 0.5,
               weight_decay=0.1)
    assert params["decoder.w"].item() == pytest.approx(2.0 * (1 - 0.5 * 0.1))


def test_adamw_backbone_group_uses_low_lr():
    params = {"backbone.w": torch.tensor([1.0]), "decoder.w": torch.tensor([1.0])}
    state = init_adam_state(params)
    grads = {k: torch.tensor([1.0]) for k in params}
    adamw_step(params, grads, state, lr_backbone=0.0, lr_rest=0.1,
               weight_decay=0.0, clip_norm=0.0)
    assert params["backbone.w"].item() == 1.0
    assert params["decoder.w"].item() < 1.0


def test_adamw_rejects_shape_mismatch():
    params = {"w": torch.ones(3)}
    state = init_adam_state(params)
    with pytest.raises(ValueError):
        adamw_step(params, {"w": torch.ones(4)}, state, 0.1, 0.1)


def test_clip_gradients_noop_below_cap():
    grads = {"a": torch.tensor([0.3]), "b": torch.tensor([0.4])}
    norm = clip_gradients(grads, max_norm=1.0)
    assert norm == pytest.approx(0.5)
    assert grads["a"].item() == pytest.approx(0.3)


# -- schedule ----------------------------------------------------------------


def test_lr_at_anchor_iterations():
    assert lr_at(0) == (0.0, 1e-4)
    assert lr_at(2000) == (1e-5, 1e-4)
    assert lr_at(25000) == (0.5e-5, 0.5e-4)


def test_lr_at_warmup_interpolates():
    lb, lr = lr_at(500)
    assert lb == pytest.approx(0.25e-5)
    assert lr == 1e-4


def test_lr_at_decay_floors():
    assert lr_at(49999)[1] == pytest.approx(0.5e-4)
    assert lr_at(50000)[1] == pytest.approx(0.25e-4)
    with pytest.raises(ValueError):
        lr_at(-1)


# -- training loop -----------------------------------------------------------


def test_train_loop_deterministic_and_schedule_exact():
    samples = [random_sample(s) for s in range(3)]
    cfg = tiny_cfg()
    kwargs = dict(steps=4, seed=42, batch_size=2, base_backbone=1e-4,
                  base_rest=1e-3, warmup=10)
    a = train_loop(samples, cfg, **kwargs)
    b = train_loop(samples, cfg, **kwargs)
    assert [r.loss for r in a.trace] == [r.loss for r in b.trace]
    for rec in a.trace:
        lb, lr = lr_at(rec.step, base_backbone=1e-4, base_rest=1e-3, warmup=10)
        assert rec.lr_backbone == lb and rec.lr_rest == lr


def test_train_loop_reduces_loss():
    samples = [random_sample(s) for s in range(2)]
    cfg = tiny_cfg()
    res = train_loop(samples, cfg, steps=30, seed=1, batch_size=2,
                     base_rest=3e-3, warmup=10, augment=False)
    assert res.trace[-1].loss < res.trace[0].loss


def test_train_loop_divergence_aborts_with_trace():
    samples = [random_sample(0)]
    cfg = tiny_cfg()
    model = build_model(cfg, seed=0)
    with torch.no_grad():
        model.head.conv2.weight.fill_(float("inf"))
    with pytest.raises(TrainingDiverged) as err:
        train_loop(samples, cfg, steps=2, seed=0, batch_size=1, model=model)
    assert err.value.step == 0
    assert err.value.trace == []


def test_augment_preserves_depth_values_and_validity():
    sample = random_sample(5, h=42, w=56)
    out = augment_sample(sample, (28, 28), derive_rng(6, 0))
    assert out.gt_depth.shape == (28, 28)
    src_values = set(np.unique(sample.gt_depth))
    assert set(np.unique(out.gt_depth)) <= src_values
    assert set(np.unique(out.sensor_depth)) <= set(np.unique(sample.sensor_depth))


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip_byte_identical(tmp_path):
    model = build_model(tiny_cfg(), seed=0)
    state = init_adam_state(dict(model.named_parameters()))
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, model, opt_state=state, step=3)
    model2, state2, step = load_checkpoint(p1)
    assert step == 3
    save_checkpoint(p2, model2, opt_state=state2, step=step)
    assert p1.read_bytes() == p2.read_bytes()
    for (n1, a), (n2, b) in zip(
        model.named_parameters(), model2.named_parameters()
    ):
        assert n1 == n2
        assert torch.equal(a, b)


def test_checkpoint_rejects_corruption(tmp_path):
    model = build_model(tiny_cfg(), seed=0)
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, model)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_resume_continues_trace(tmp_path):
    samples = [random_sample(s) for s in range(2)]
    cfg = tiny_cfg()
    kwargs = dict(seed=9, batch_size=2, base_rest=1e-3, warmup=10)
    full = train_loop(samples, cfg, steps=6, **kwargs)

    half = train_loop(samples, cfg, steps=3, **kwargs)
    path = tmp_path / "half.ckpt"
    save_checkpoint(path, half.model, opt_state=half.opt_state, step=3)
    model, opt_state, step = load_checkpoint(path)
    resumed = train_loop(samples, cfg, steps=3, model=model, opt_state=opt_state,
                         start_step=step, **kwargs)
    for ref, got in zip(full.trace[3:], resumed.trace):
        assert got.step == ref.step
        assert got.loss == pytest.approx(ref.loss, rel=1e-5)


# -- attention extraction ----------------------------------------------------


def _identity_record(gh=2, gw=2, heads=1):
    # [cls] + 4 RGB + 4 depth tokens, depth query q attends only to the
    # co-located RGB key
    n_tok = gh * gw
    t = 1 + 2 * n_tok
    probs = torch.full((heads, t, t), 0.0)
    probs[:, :, 0] = 1.0  # default rows: everything on cls
    for q in range(n_tok):
        row = 1 + n_tok + q
        probs[:, row, :] = 0.0
        probs[:, row, 1 + q] = 1.0
    modality = torch.tensor([0] + [MOD_RGB] * n_tok + [MOD_DEPTH] * n_tok)
    cells = torch.tensor([-1] + list(range(n_tok)) * 2)
    return AttentionRecord(probs, modality, cells, (gh, gw))


def test_extract_attention_identity_peaks_at_query_cell():
    record = _identity_record()
    heat = extract_attention(record, (1, 0), (28, 28))
    assert heat.shape == (28, 28)
    assert heat.max() == 1.0 and heat.min() == 0.0
    peak = np.unravel_index(np.argmax(heat), heat.shape)
    assert 14 <= peak[0] < 28 and 0 <= peak[1] < 14  # bottom-left patch


def test_extract_attention_uniform_returns_zeros():
    record = _identity_record()
    n_tok = 4
    record.probs[:, 1 + n_tok :, :] = 0.0
    record.probs[:, 1 + n_tok :, 1 : 1 + n_tok] = 0.25
    heat = extract_attention(record, (0, 0), (28, 28))
    assert (heat == 0).all()


def test_extract_attention_masked_query_errors():
    model = build_model(tiny_cfg(), seed=0)
    rgb, depth = tiny_inputs()
    mask = np.array([[True, False], [False, False]])
    _, record = model(rgb, depth, mask)
    with pytest.raises(ValueError):
        extract_attention(record, (0, 0), (28, 28))
    heat = extract_attention(record, (0, 1), (28, 28))
    assert heat.shape == (28, 28)
    with pytest.raises(ValueError):
        extract_attention(record, (5, 5), (28, 28))
