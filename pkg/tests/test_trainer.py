import dataclasses

import numpy as np
import pytest

from denseflow.checkpoint import load_checkpoint
from denseflow.config import ConfigError
from denseflow.data import FlowSample
from denseflow.losses import bilinear_warp
from denseflow.network import build
from denseflow.toy import ToyConfig, gen_toy_dataset
from denseflow.trainer import (
    AdamState,
    AugmentationConfig,
    MissingGradientError,
    NonFiniteLossError,
    TrainConfig,
    TrainRecord,
    adam_step,
    augment,
    init_network,
    lr_at,
    read_log,
    smoothed,
    train,
)


# -- optimizer and schedule ---------------------------------------------------------


def scalar_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    return theta


def test_adam_matches_scalar_recurrence(rng):
    grads = rng.normal(size=(5, 4))
    p = {"w": np.array([0.5, -1.0, 2.0, 0.0])}
    state = AdamState.zeros_like(p)
    for g in grads:
        adam_step(p, {"w": g.copy()}, state, lr=0.01)
    expect = [scalar_adam(p0, grads[:, i], 0.01) for i, p0 in enumerate([0.5, -1.0, 2.0, 0.0])]
    np.testing.assert_allclose(p["w"], expect, rtol=1e-12)
    assert state.t == 5


def test_first_adam_step_moves_by_lr():
    p = {"w": np.zeros(3)}
    adam_step(p, {"w": np.array([3.0, -0.2, 1e-3])}, AdamState.zeros_like(p), lr=0.1)
    np.testing.assert_allclose(p["w"], [-0.1, 0.1, -0.1], rtol=1e-4)


def test_adam_rejects_missing_gradient():
    p = {"a": np.zeros(2), "b": np.zeros(2)}
    state = AdamState.zeros_like(p)
    with pytest.raises(MissingGradientError, match="b"):
        adam_step(p, {"a": np.ones(2), "b": None}, state, lr=0.1)
    assert state.t == 0


def test_adam_keeps_float32():
    p = {"w": np.ones(4, dtype=np.float32)}
    adam_step(p, {"w": np.ones(4, dtype=np.float32)}, AdamState.zeros_like(p), lr=1e-3)
    assert p["w"].dtype == np.float32


def test_lr_schedule():
    cfg = TrainConfig(base_lr=1e-5, halve_every=100_000)
    assert lr_at(0, cfg) == 1e-5
    assert lr_at(99_999, cfg) == 1e-5
    assert lr_at(100_000, cfg) == 5e-6
    assert lr_at(250_000, cfg) == 2.5e-6
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


@pytest.mark.parametrize("kwargs", [
    {"base_lr": 0.0}, {"max_iters": 0}, {"batch_size": 0}, {"halve_every": 0}, {"seed": -1},
])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


@pytest.mark.parametrize("kwargs", [
    {"flip_prob": 1.5}, {"crop_size": (0, 4)}, {"brightness_range": (1.2, 0.8)}, {"noise_sigma": 0.0},
])
def test_augmentation_config_validation(kwargs):
    with pytest.raises(ConfigError):
        AugmentationConfig(**kwargs)


def test_smoothed():
    assert smoothed([2.0, 2.0, 2.0]) == pytest.approx([2.0, 2.0, 2.0])
    s = smoothed([1.0, 0.0])
    assert s[1] == pytest.approx(0.9 / 1.9)


def test_record_round_trip():
    rec = TrainRecord(12, 1e-5, 0.123456789, (0.1, 0.02, 0.003), epe=1.5)
    assert TrainRecord.parse(rec.format()) == rec
    plain = TrainRecord(3, 2e-4, 1.0, (1.0,))
    assert TrainRecord.parse(plain.format()) == plain
    with pytest.raises(ValueError):
        TrainRecord.parse("iter 3 loss 1.0")


# -- augmentation -------------------------------------------------------------------


@pytest.fixture
def integer_sample():
    cfg = ToyConfig(size=16, shape_min=4, shape_max=8, max_displacement=3.0, integer_displacement=True, seed=9)
    return gen_toy_dataset(cfg, 1)[0]


def warp_residual(s):
    warped = bilinear_warp(s.frame2[None].astype(np.float64), s.gt_flow[None].astype(np.float64)).data[0]
    return np.abs(warped - s.frame1)[:, s.valid_mask].max()


def test_flip_keeps_ground_truth_consistent(integer_sample):
    cfg = dataclasses.replace(AugmentationConfig.disabled(), flip=True, flip_prob=1.0)
    out = augment(integer_sample, cfg, np.random.default_rng(0))
    assert np.array_equal(out.frame1, integer_sample.frame1[:, :, ::-1])
    assert warp_residual(out) <= 1e-6


def test_crop_keeps_ground_truth_consistent(integer_sample):
    cfg = dataclasses.replace(AugmentationConfig.disabled(), crop=True, crop_size=(10, 12))
    for seed in range(5):
        out = augment(integer_sample, cfg, np.random.default_rng(seed))
        assert out.frame1.shape == (3, 10, 12) and out.valid_mask.shape == (10, 12)
        assert warp_residual(out) <= 1e-6


def test_crop_larger_than_image(integer_sample):
    cfg = dataclasses.replace(AugmentationConfig.disabled(), crop=True, crop_size=(32, 32))
    with pytest.raises(ValueError):
        augment(integer_sample, cfg, np.random.default_rng(0))


def test_disabled_is_identity(integer_sample):
    out = augment(integer_sample, AugmentationConfig.disabled(), np.random.default_rng(0))
    assert np.array_equal(out.frame1, integer_sample.frame1)
    assert np.array_equal(out.gt_flow, integer_sample.gt_flow)


def test_photometric_shared_between_frames(integer_sample):
    cfg = dataclasses.replace(AugmentationConfig(), flip=False, noise=False)
    same = FlowSample(integer_sample.frame1, integer_sample.frame1.copy())
    out = augment(same, cfg, np.random.default_rng(1))
    assert np.array_equal(out.frame1, out.frame2)
    assert not np.array_equal(out.frame1, same.frame1)
    asym = augment(same, dataclasses.replace(cfg, asymmetric=True), np.random.default_rng(1))
    assert not np.array_equal(asym.frame1, asym.frame2)


def test_augmented_values_stay_in_unit_range(integer_sample):
    out = augment(integer_sample, AugmentationConfig(), np.random.default_rng(2))
    assert out.frame1.min() >= 0.0 and out.frame1.max() <= 1.0
    assert out.frame1.dtype == np.float32


# -- training loop --------------------------------------------------------------------


def run(samples, cfg, net_cfg, out, **kw):
    return train(samples, cfg, init_network(net_cfg, cfg.seed), out, **kw)


def test_log_and_checkpoints(tmp_path, toy_samples, tiny_config, tiny_train_config):
    result = run(toy_samples, tiny_train_config, tiny_config, tmp_path, header_lines=["train.seed = 3"])
    assert result.iteration == 6
    records = read_log(tmp_path / "train.log")
    assert [r.iteration for r in records] == list(range(6))
    assert all(len(r.scales) == 3 and np.isfinite(r.loss) for r in records)
    assert (tmp_path / "train.log").read_text().startswith("# train.seed = 3\n")
    assert (tmp_path / "checkpoint_0000003.dfw").exists()
    assert not (tmp_path / "checkpoint_0000006.dfw").exists()
    assert load_checkpoint(tmp_path / "final.dfw").iteration == 6


def test_resume_reproduces_uninterrupted_run(tmp_path, toy_samples, tiny_config, tiny_train_config):
    run(toy_samples, tiny_train_config, tiny_config, tmp_path / "a")
    run(toy_samples, tiny_train_config, tiny_config, tmp_path / "b")
    # continue b from its halfway checkpoint after a simulated crash
    resumed = run(toy_samples, tiny_train_config, tiny_config, tmp_path / "b",
                  resume=tmp_path / "b" / "checkpoint_0000003.dfw")
    assert [r.iteration for r in resumed.records] == [3, 4, 5]
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "final.dfw").read_bytes() == (b / "final.dfw").read_bytes()
    assert (a / "train.log").read_text() == (b / "train.log").read_text()


def test_resume_with_other_seed_fails(tmp_path, toy_samples, tiny_config, tiny_train_config):
    run(toy_samples, tiny_train_config, tiny_config, tmp_path)
    other = dataclasses.replace(tiny_train_config, seed=4)
    with pytest.raises(ConfigError, match="seed"):
        run(toy_samples, other, tiny_config, tmp_path, resume=tmp_path / "checkpoint_0000003.dfw")


def test_ground_truth_never_reaches_training(tmp_path, toy_samples, tiny_config, tiny_train_config):
    cfg = dataclasses.replace(tiny_train_config, max_iters=2)
    scrambled = [FlowSample(s.frame1, s.frame2, np.full_like(s.gt_flow, 7.0),
                            np.zeros_like(s.valid_mask), s.sample_id) for s in toy_samples]
    run(toy_samples, cfg, tiny_config, tmp_path / "a")
    run(scrambled, cfg, tiny_config, tmp_path / "b")
    run([s.without_gt() for s in toy_samples], cfg, tiny_config, tmp_path / "c")
    ref = (tmp_path / "a" / "final.dfw").read_bytes()
    assert (tmp_path / "b" / "final.dfw").read_bytes() == ref
    assert (tmp_path / "c" / "final.dfw").read_bytes() == ref


def test_heldout_epe_is_logged(tmp_path, toy_samples, tiny_config, tiny_train_config):
    cfg = dataclasses.replace(tiny_train_config, max_iters=4, eval_every=2)
    result = run(toy_samples[:4], cfg, tiny_config, tmp_path, heldout=toy_samples[4:])
    assert [r.epe is not None for r in result.records] == [False, True, False, True]
    assert read_log(tmp_path / "train.log")[1].epe == pytest.approx(result.records[1].epe, abs=1e-6)


def test_non_finite_loss_stops_with_diagnostic(tmp_path, toy_samples, tiny_config, tiny_train_config):
    bad = [FlowSample(np.full_like(s.frame1, np.nan), s.frame2) for s in toy_samples]
    with pytest.raises(NonFiniteLossError) as info:
        run(bad, tiny_train_config, tiny_config, tmp_path)
    assert info.value.iteration == 0
    assert len(info.value.scales) == 3
    records = read_log(tmp_path / "train.log")
    assert len(records) == 1 and not np.isfinite(records[0].loss)


def test_interrupt_writes_final_checkpoint(tmp_path, toy_samples, tiny_config, tiny_train_config):
    def stop(rec):
        if rec.iteration == 1:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        run(toy_samples, tiny_train_config, tiny_config, tmp_path, progress=stop)
    assert load_checkpoint(tmp_path / "final.dfw").iteration == 2


def test_rejects_indivisible_frames(tmp_path, tiny_config, tiny_train_config):
    samples = gen_toy_dataset(ToyConfig(size=16, shape_min=4, shape_max=8, max_displacement=2.0), 2)
    odd = [FlowSample(s.frame1[:, :14, :14], s.frame2[:, :14, :14]) for s in samples]
    net = build(tiny_config, rng=0)
    with pytest.raises(ValueError, match="divisible"):
        train(odd, tiny_train_config, net, tmp_path)
