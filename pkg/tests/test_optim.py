import logging
import math

import numpy as np
import pytest

from srank_lab.errors import DivergedError, ShapeError
from srank_lab.linalg import frobenius_norm, numeric_rank, svd
from srank_lab.net import ModelConfig, init_params
from srank_lab.optim import (
    AdamWState,
    MetricsRecord,
    MSignConfig,
    adamw_step,
    clip_global_norm,
    lr_at,
    msign_apply,
    msign_target_names,
    train_step,
)
from srank_lab.spectral import stable_rank


def small_params(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "embed": rng.normal(size=(6, 4)),
        "block0.attn_norm_g": np.ones(4),
        "block0.wq": rng.normal(size=(4, 4)),
        "block0.w1": rng.normal(size=(4, 8)),
    }


def test_adamw_zero_gradient_no_decay():
    params = small_params()
    grads = {k: np.zeros_like(p) for k, p in params.items()}
    state = AdamWState.init(params, weight_decay=0.0)
    new, state = adamw_step(params, grads, state, lr=0.1)
    assert state.t == 1
    for k in params:
        assert np.array_equal(new[k], params[k])


def test_adamw_first_step_closed_form():
    params = {"w": np.array([[1.0, -2.0]])}
    g = np.array([[0.5, -3.0]])
    state = AdamWState.init(params, weight_decay=0.0)
    new, state = adamw_step(params, {"w": g}, state, lr=0.01)
    # after one step m_hat = g and v_hat = g^2, so the update is
    # -lr * g / (|g| + eps): magnitude ~ lr, direction -sign(g)
    expected = params["w"] - 0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(new["w"], expected, rtol=1e-12)


def test_adamw_pure_decay():
    params = {"w": np.array([[2.0, -4.0]])}
    grads = {"w": np.zeros((1, 2))}
    state = AdamWState.init(params, weight_decay=0.1)
    new, _ = adamw_step(params, grads, state, lr=0.05)
    assert np.allclose(new["w"], params["w"] * (1.0 - 0.05 * 0.1), rtol=1e-12)


def test_adamw_no_decay_set():
    params = small_params()
    grads = {k: np.zeros_like(p) for k, p in params.items()}
    state = AdamWState.init(params, no_decay=frozenset({"block0.attn_norm_g"}))
    new, _ = adamw_step(params, grads, state, lr=0.1)
    assert np.array_equal(new["block0.attn_norm_g"], params["block0.attn_norm_g"])
    assert not np.array_equal(new["embed"], params["embed"])


def test_adamw_shape_mismatch():
    params = {"w": np.ones((2, 2))}
    state = AdamWState.init(params)
    with pytest.raises(ShapeError):
        adamw_step(params, {"w": np.ones((2, 3))}, state, lr=0.1)


def test_clip_below_threshold_unchanged():
    grads = {"a": np.array([[0.3, 0.4]])}
    clipped, norm = clip_global_norm(grads, max_norm=1.0)
    assert norm == pytest.approx(0.5)
    assert np.array_equal(clipped["a"], grads["a"])


def test_clip_scales_to_max_norm():
    grads = {"a": np.array([[4.0, 0.0]]), "b": np.zeros((2, 2))}
    clipped, norm = clip_global_norm(grads, max_norm=1.0)
    assert norm == pytest.approx(4.0)
    total = math.sqrt(sum(float((g * g).sum()) for g in clipped.values()))
    assert total == pytest.approx(1.0, rel=1e-12)


def test_clip_norm_is_root_sum_of_squares():
    rng = np.random.default_rng(1)
    grads = {f"t{i}": rng.normal(size=(3, 4)) for i in range(4)}
    direct = math.sqrt(sum(frobenius_norm(g) ** 2 for g in grads.values()))
    _, norm = clip_global_norm(grads, max_norm=1e9)
    assert norm == pytest.approx(direct, rel=1e-12)


def test_lr_schedule_shape():
    base, warmup, total = 3e-3, 2000, 10_000
    assert lr_at(0, base, warmup, total) == 0.0
    assert lr_at(warmup, base, warmup, total) == pytest.approx(base)
    assert lr_at(total, base, warmup, total) == pytest.approx(base / 10.0)
    assert lr_at(total + 500, base, warmup, total) == pytest.approx(base / 10.0)
    with pytest.raises(ValueError):
        lr_at(5, base, warmup=100, total=100)


def test_lr_schedule_continuity():
    base, warmup, total = 1e-2, 50, 400
    bound = base / min(warmup, total - warmup) + 1e-15
    prev = lr_at(0, base, warmup, total)
    for step in range(1, total + 10):
        cur = lr_at(step, base, warmup, total)
        assert abs(cur - prev) <= bound
        prev = cur


def model_for_msign():
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, seq_len=8, vocab=16,
                      init_std=0.05, zero_query_init=False)
    return init_params(cfg, seed=21)


def test_msign_config_validation():
    with pytest.raises(ValueError):
        MSignConfig(period=0)
    with pytest.raises(ValueError):
        MSignConfig(targets="everything")


def test_msign_apply_off_step_is_noop():
    model = model_for_msign()
    cfg = MSignConfig(period=100, targets="all_2d")
    out, applied = msign_apply(model.tensors, step=37, cfg=cfg)
    assert applied == []
    for k in model.tensors:
        assert np.array_equal(out[k], model.tensors[k])


def test_msign_targets_attention_only():
    model = model_for_msign()
    cfg = MSignConfig(period=1, targets="attention_only")
    out, applied = msign_apply(model.tensors, step=5, cfg=cfg)
    expected = {f"block{i}.{w}" for i in range(2) for w in ("wq", "wk", "wv", "wo")}
    assert set(applied) == expected
    assert np.array_equal(out["block0.w1"], model.tensors["block0.w1"])
    assert np.array_equal(out["embed"], model.tensors["embed"])


def test_msign_targets_mlp_only():
    model = model_for_msign()
    out, applied = msign_apply(model.tensors, step=2, cfg=MSignConfig(period=2, targets="mlp_only"))
    assert set(applied) == {f"block{i}.{w}" for i in range(2) for w in ("w1", "w2")}


def test_msign_all_2d_excludes_embeddings_and_gains():
    model = model_for_msign()
    cfg = MSignConfig(period=1, targets="all_2d")
    names = msign_target_names(model.tensors, cfg)
    assert "embed" not in names
    assert not any(n.endswith("_g") for n in names)
    with_embed = MSignConfig(period=1, targets="all_2d", include_embeddings=True)
    assert "embed" in msign_target_names(model.tensors, with_embed)


def test_msign_preserves_norms_and_maximizes_srank():
    model = model_for_msign()
    cfg = MSignConfig(period=1, targets="all_2d")
    out, applied = msign_apply(model.tensors, step=1, cfg=cfg)
    for name in applied:
        before, after = model.tensors[name], out[name]
        assert abs(frobenius_norm(after) - frobenius_norm(before)) <= 1e-10 * frobenius_norm(before)
        rank = numeric_rank(before)
        assert stable_rank(after) == pytest.approx(rank, rel=1e-6)
        # range preservation: after's columns stay inside range(before)
        f = svd(before)
        projector = f.u @ f.u.T
        residual = after - projector @ after
        assert frobenius_norm(residual) <= 1e-8 * frobenius_norm(after)


def test_msign_skips_exactly_zero_tensor(caplog):
    model = model_for_msign()
    model.tensors["block0.wq"] = np.zeros_like(model.tensors["block0.wq"])
    cfg = MSignConfig(period=1, targets="attention_only")
    with caplog.at_level(logging.WARNING):
        out, applied = msign_apply(model.tensors, step=1, cfg=cfg)
    assert "block0.wq" not in applied
    assert not out["block0.wq"].any()
    assert any("block0.wq" in rec.message for rec in caplog.records)


def test_train_step_none_targets_is_plain_adamw():
    model = model_for_msign()
    batch = np.arange(8)[None, :] % model.cfg.vocab
    msign_none = MSignConfig(period=1, targets="none")
    state_a = AdamWState.init(model.tensors)
    model_a, state_a, rec = train_step(model, batch, state_a, msign_none, lambda s: 1e-3, 1)

    from srank_lab.net import batch_loss_and_grads

    loss, grads = batch_loss_and_grads(model, batch)
    clipped, pre = clip_global_norm(grads, 1.0)
    state_b = AdamWState.init(model.tensors)
    manual, _ = adamw_step(model.tensors, clipped, state_b, 1e-3)
    for k in manual:
        assert np.array_equal(model_a.tensors[k], manual[k])
    assert rec.grad_norm == pytest.approx(pre, rel=1e-12)
    assert rec.loss == pytest.approx(loss, rel=1e-12)
    assert rec.msign_applied == 0


def test_train_step_period_one_makes_partial_isometries():
    model = model_for_msign()
    batch = np.arange(8)[None, :] % model.cfg.vocab
    cfg = MSignConfig(period=1, targets="all_2d")
    state = AdamWState.init(model.tensors)
    for step in (1, 2):
        model, state, rec = train_step(model, batch, state, cfg, lambda s: 1e-3, step)
        assert rec.msign_applied == 1
        for name in msign_target_names(model.tensors, cfg):
            w = model.tensors[name]
            s = svd(w).s
            assert np.abs(s / s[0] - 1.0).max() <= 1e-8


def test_train_step_msign_moments_untouched():
    model = model_for_msign()
    batch = np.arange(8)[None, :] % model.cfg.vocab
    cfg_none = MSignConfig(period=1, targets="none")
    cfg_all = MSignConfig(period=1, targets="all_2d")
    s1 = AdamWState.init(model.tensors)
    s2 = AdamWState.init(model.tensors)
    _, s1, _ = train_step(model, batch, s1, cfg_none, lambda s: 1e-3, 1)
    _, s2, _ = train_step(model, batch, s2, cfg_all, lambda s: 1e-3, 1)
    for k in s1.m:
        assert np.array_equal(s1.m[k], s2.m[k])
        assert np.array_equal(s1.v[k], s2.v[k])


def test_train_step_diverged_signal():
    model = model_for_msign()
    model.tensors["embed"] = model.tensors["embed"] * np.inf
    model.tensors["embed"][~np.isfinite(model.tensors["embed"])] = np.nan
    batch = np.arange(8)[None, :] % model.cfg.vocab
    state = AdamWState.init(model.tensors)
    with np.errstate(invalid="ignore", over="ignore"):
        with pytest.raises(DivergedError) as err:
            train_step(model, batch, state, MSignConfig(), lambda s: 1e-3, 17)
    assert err.value.step == 17


def test_metrics_record_csv_row():
    rec = MetricsRecord(step=3, loss=1.25, grad_norm=0.5, lr=1e-3)
    row = rec.csv_row()
    cells = row.split(",")
    assert cells[0] == "3"
    assert cells[1] == "1.25"
    assert cells[4] == "nan"
    assert cells[-1] == "0"
    assert MetricsRecord.CSV_HEADER.count(",") == row.count(",")
