import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffcast.core import EventSample, RadarSequence
from diffcast.framework import (CheckpointError, DiffCast, NonFiniteLossError, compute_residual, fit,
                                forecast, forecast_batch, group_segments, load_checkpoint, save_checkpoint,
                                set_training_mode, training_step, zero_segment)

from conftest import toy_config


def make_events(n, cfg, size=16, seed=0):
    g = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = RadarSequence(g.random((cfg.L_in, size, size, 1)).astype(np.float32))
        y = RadarSequence(g.random((cfg.L_out, size, size, 1)).astype(np.float32))
        out.append(EventSample(x, y, f"e{i}"))
    return out


def test_compute_residual_examples(rng):
    y = rng.random((4, 3, 3, 1)).astype(np.float32)
    assert np.all(compute_residual(y, y) == 0)
    assert np.array_equal(compute_residual(y, np.zeros_like(y)), y)
    mu = rng.random((4, 3, 3, 1)).astype(np.float32)
    r = compute_residual(y, mu)
    assert np.array_equal(r + mu, (y - mu) + mu)
    with pytest.raises(ValueError):
        compute_residual(y, mu[:2])


def test_group_segments_frame_ranges():
    r = np.arange(20)[:, None, None, None] * np.ones((20, 2, 2, 1))
    segs = group_segments(r, 5)
    assert [s.index for s in segs] == [1, 2, 3, 4]
    assert [(int(s.value[0, 0, 0, 0]), int(s.value[-1, 0, 0, 0])) for s in segs] == [(0, 4), (5, 9), (10, 14), (15, 19)]
    single = group_segments(r, 20)
    assert len(single) == 1 and np.array_equal(single[0].value, r)
    with pytest.raises(ValueError):
        group_segments(r, 6)
    z = zero_segment(segs[0].value)
    assert z.index == 0 and not z.value.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 24), st.data())
def test_partition_property(L, data):
    K = data.draw(st.sampled_from([k for k in range(1, L + 1) if L % k == 0]))
    r = np.random.default_rng(L).normal(size=(L, 2, 3, 1))
    segs = group_segments(r, K)
    assert len(segs) == L // K
    assert np.array_equal(np.concatenate([s.value for s in segs]), r)


@pytest.fixture
def toy():
    cfg = toy_config()
    return cfg, DiffCast(cfg), make_events(4, cfg)


def test_alpha_zero_reduces_to_deterministic_loss(toy):
    cfg, models, events = toy
    set_training_mode(models, alpha=0.0)
    rep = training_step(events[:2], models, rng=torch.Generator().manual_seed(0))
    assert rep.loss_total == pytest.approx(rep.loss_deterministic, abs=1e-6)
    assert rep.grad_norm_denoiser == 0.0
    assert rep.grad_norm_globalnet == 0.0


def test_alpha_one_reduces_to_denoising_loss(toy):
    cfg, models, events = toy
    set_training_mode(models, alpha=1.0)
    rep = training_step(events[:2], models, rng=torch.Generator().manual_seed(0))
    assert rep.loss_total == pytest.approx(sum(rep.loss_denoising_per_segment), abs=1e-6)


def test_loss_combination_identity_every_step(toy):
    cfg, models, events = toy
    for rep in fit(models, events, iters=3, batch_size=2):
        want = rep.alpha * sum(rep.loss_denoising_per_segment) + (1 - rep.alpha) * rep.loss_deterministic
        assert rep.loss_total == pytest.approx(want, abs=1e-6)
        assert len(rep.loss_denoising_per_segment) == cfg.L_out // cfg.K
    set_training_mode(models, alpha=0.25)
    rep = training_step(events[:2], models, rng=torch.Generator().manual_seed(1))
    assert rep.alpha == 0.25
    want = 0.25 * sum(rep.loss_denoising_per_segment) + 0.75 * rep.loss_deterministic
    assert rep.loss_total == pytest.approx(want, abs=1e-6)


def test_denoising_loss_reaches_backbone(toy):
    cfg, models, events = toy
    before = [p.detach().clone() for p in models.parameters()]
    rep = training_step(events[:2], models, rng=torch.Generator().manual_seed(0), denoise_only=True)
    assert rep.grad_norm_backbone > 0
    assert rep.grad_norm_denoiser > 0 and rep.grad_norm_globalnet > 0
    assert all(torch.equal(a, b) for a, b in zip(before, models.parameters()))


def test_frozen_backbone_gets_no_gradient_and_no_update(toy):
    cfg, models, events = toy
    set_training_mode(models, frozen_backbone=True)
    before = [p.detach().clone() for p in models.backbone.parameters()]
    for rep in fit(models, events, iters=2, batch_size=2):
        assert rep.grad_norm_backbone == 0.0
    probe = training_step(events[:2], models, rng=torch.Generator().manual_seed(0), denoise_only=True)
    assert probe.grad_norm_backbone == 0.0
    assert all(torch.equal(a, b) for a, b in zip(before, models.backbone.parameters()))
    set_training_mode(models, frozen_backbone=False)
    assert training_step(events[:2], models, rng=torch.Generator().manual_seed(0)).grad_norm_backbone > 0


def test_set_training_mode_validation(toy):
    cfg, models, _ = toy
    with pytest.raises(ValueError):
        set_training_mode(models, alpha=2.0)
    with pytest.raises(ValueError):
        set_training_mode(models, use_globalnet=False)


def test_non_finite_loss_aborts(toy):
    cfg, models, events = toy
    bad = events[0]
    frames = bad.y.frames.copy()
    x = torch.as_tensor(bad.x.frames[None]).permute(0, 1, 4, 2, 3)
    y = torch.as_tensor(frames[None]).permute(0, 1, 4, 2, 3).clone()
    y[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        training_step((x, y), models, rng=torch.Generator().manual_seed(0))
    assert "loss_deterministic" in info.value.diagnostics


def test_teacher_forcing_provenance(toy):
    cfg, models, events = toy
    seen = []
    models.conditioning_hooks.append(lambda phase, j, src: seen.append((phase, j, src)))
    training_step(events[:2], models, rng=torch.Generator().manual_seed(0))
    forecast(events[0].x.frames, models, rng=torch.Generator().manual_seed(0))
    assert seen == [("train", 1, "zero"), ("train", 2, "ground_truth"),
                    ("inference", 1, "zero"), ("inference", 2, "generated")]


def test_forecast_composition_and_determinism(toy):
    cfg, models, events = toy
    fit(models, events, iters=2, batch_size=2)
    a = forecast(events[0].x.frames, models, rng=torch.Generator().manual_seed(7))
    b = forecast(events[0].x.frames, models, rng=torch.Generator().manual_seed(7))
    assert a.y_hat.shape == (cfg.L_out, 16, 16, 1)
    assert np.array_equal(a.y_hat, a.mu + a.residual_hat)
    for field in ("mu", "residual_hat", "y_hat"):
        assert np.array_equal(getattr(a, field), getattr(b, field))


def test_forecast_batch_matches_definition(toy):
    cfg, models, events = toy
    preds = forecast_batch([e.x.frames for e in events], models, rng=torch.Generator().manual_seed(0))
    assert len(preds) == len(events)
    for p in preds:
        assert np.array_equal(p.y_hat, p.mu + p.residual_hat)


def test_forecast_without_globalnet():
    cfg = toy_config(use_globalnet=False)
    models = DiffCast(cfg)
    assert models.globalnet is None
    events = make_events(2, cfg)
    fit(models, events, iters=1, batch_size=2)
    p = forecast(events[0].x.frames, models, rng=torch.Generator().manual_seed(0))
    assert p.y_hat.shape == (cfg.L_out, 16, 16, 1)


def test_ddpm_forecast_runs():
    cfg = toy_config(sampler="ddpm", sample_steps=20)
    models = DiffCast(cfg)
    p = forecast(make_events(1, cfg)[0].x.frames, models, rng=torch.Generator().manual_seed(0))
    assert np.all(np.isfinite(p.y_hat))


def test_checkpoint_round_trip(toy, tmp_path):
    cfg, models, events = toy
    fit(models, events, iters=2, batch_size=2)
    path = tmp_path / "m.pt"
    save_checkpoint(path, models)
    again = load_checkpoint(path)
    assert again.step_count == 2
    for (k, a), (_, b) in zip(models.state_dict().items(), again.state_dict().items()):
        assert torch.equal(a, b), k
    x = events[0].x.frames
    pa = forecast(x, models, rng=torch.Generator().manual_seed(1))
    pb = forecast(x, again, rng=torch.Generator().manual_seed(1))
    assert np.array_equal(pa.y_hat, pb.y_hat)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect_config=toy_config(alpha=0.3))


def test_tampered_checkpoint_detected(toy, tmp_path):
    cfg, models, _ = toy
    path = tmp_path / "m.pt"
    save_checkpoint(path, models)
    blob = torch.load(path, weights_only=False)
    blob["config"] = blob["config"].replace('"alpha": 0.5', '"alpha": 0.6')
    torch.save(blob, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
