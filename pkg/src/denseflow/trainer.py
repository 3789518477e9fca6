"""Unsupervised training: Adam, the step learning-rate schedule, augmentation,
logging and checkpoints.

Every iteration draws its randomness (sample indices, augmentation, dropout)
from ``numpy.random.default_rng([seed, iteration])``.  The trajectory is
therefore a pure function of (seed, configs, dataset), and resuming only
needs the iteration counter, the parameters, the batch-norm statistics and
the Adam moments.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, dataclass_lines, format_value
from .data import FlowSample, stack_frames
from .evaluate import evaluate_network
from .losses import DEFAULT_LOSS_WEIGHTS, CharbonnierParams, LossWeights, multiscale_loss
from .network import Network, build

# -- optimizer -----------------------------------------------------------------


class MissingGradientError(RuntimeError):
    """A parameter received no gradient (dead path in the graph)."""


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays):
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(params, grads, state: AdamState, lr):
    """Bias-corrected Adam update of the arrays in ``params``, in place."""
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise MissingGradientError(f"no gradient for {len(missing)} parameter(s): {', '.join(missing[:3])}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        dt = p.dtype.type
        m = state.m[name]
        v = state.v[name]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        step = m / dt(c1)
        step /= np.sqrt(v / dt(c2)) + dt(state.eps)
        step *= dt(lr)
        p -= step


def lr_at(iteration, cfg):
    """base_lr halved every ``halve_every`` iterations."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.base_lr * 0.5 ** (iteration // cfg.halve_every)


# -- augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    """Augmentations for training pairs; every item has its own switch.

    Geometric ops act identically on both frames.  Photometric parameters are
    shared by the two frames unless ``asymmetric`` is set; the additive noise
    is drawn independently per frame.
    """

    flip: bool = True
    flip_prob: float = 0.5
    crop: bool = False
    crop_size: tuple = (64, 64)
    brightness: bool = True
    brightness_range: tuple = (0.8, 1.2)
    contrast: bool = True
    contrast_range: tuple = (0.8, 1.2)
    color: bool = True
    color_range: tuple = (0.9, 1.1)
    noise: bool = True
    noise_sigma: float = 0.01
    asymmetric: bool = False

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if len(self.crop_size) != 2 or min(self.crop_size) < 1:
            raise ConfigError(f"crop_size needs two positive extents, got {self.crop_size}")
        for name in ("brightness", "contrast", "color"):
            lo_hi = getattr(self, f"{name}_range")
            if getattr(self, name) and (len(lo_hi) != 2 or not 0 < lo_hi[0] < lo_hi[1]):
                raise ConfigError(f"{name}_range must be 0 < lo < hi, got {lo_hi}")
        if self.noise and not self.noise_sigma > 0:
            raise ConfigError(f"noise_sigma must be positive, got {self.noise_sigma}")

    @classmethod
    def disabled(cls):
        return cls(flip=False, crop=False, brightness=False, contrast=False, color=False, noise=False)


def _photometric_draw(cfg, rng, channels):
    b = rng.uniform(*cfg.brightness_range) if cfg.brightness else 1.0
    c = rng.uniform(*cfg.contrast_range) if cfg.contrast else 1.0
    col = rng.uniform(*cfg.color_range, size=channels) if cfg.color else np.ones(channels)
    return b, c, col


def _photometric_apply(img, params, centre):
    b, c, col = params
    out = img * np.float32(b)
    out = (out - np.float32(centre * b)) * np.float32(c) + np.float32(centre * b)
    return out * col.astype(np.float32)[:, None, None]


def augment(sample: FlowSample, cfg: AugmentationConfig, rng) -> FlowSample:
    f1 = sample.frame1
    f2 = sample.frame2
    flow = sample.gt_flow
    mask = sample.valid_mask
    if cfg.flip and rng.random() < cfg.flip_prob:
        f1 = f1[:, :, ::-1]
        f2 = f2[:, :, ::-1]
        if flow is not None:
            # flow on the mirrored grid: u'(x) = -u(W - 1 - x)
            flow = flow[:, :, ::-1] * np.array([-1.0, 1.0], dtype=flow.dtype)[:, None, None]
        if mask is not None:
            mask = mask[:, ::-1]
    if cfg.crop:
        ch, cw = cfg.crop_size
        h, w = f1.shape[1:]
        if ch > h or cw > w:
            raise ValueError(f"crop {ch}x{cw} larger than image {h}x{w}")
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        f1 = f1[:, y0:y0 + ch, x0:x0 + cw]
        f2 = f2[:, y0:y0 + ch, x0:x0 + cw]
        if flow is not None:
            flow = flow[:, y0:y0 + ch, x0:x0 + cw]
            ys, xs = np.mgrid[0:ch, 0:cw]
            tx, ty = xs + flow[0], ys + flow[1]
            lands = (tx >= 0) & (tx <= cw - 1) & (ty >= 0) & (ty <= ch - 1)
            mask = lands if mask is None else mask[y0:y0 + ch, x0:x0 + cw] & lands
        elif mask is not None:
            mask = mask[y0:y0 + ch, x0:x0 + cw]
    f1 = np.array(f1, dtype=np.float32)
    f2 = np.array(f2, dtype=np.float32)
    if cfg.brightness or cfg.contrast or cfg.color:
        centre = float(0.5 * (f1.mean() + f2.mean()))
        p1 = _photometric_draw(cfg, rng, f1.shape[0])
        p2 = _photometric_draw(cfg, rng, f1.shape[0]) if cfg.asymmetric else p1
        f1 = _photometric_apply(f1, p1, centre)
        f2 = _photometric_apply(f2, p2, centre)
    if cfg.noise:
        f1 = f1 + rng.normal(0.0, cfg.noise_sigma, size=f1.shape).astype(np.float32)
        f2 = f2 + rng.normal(0.0, cfg.noise_sigma, size=f2.shape).astype(np.float32)
    np.clip(f1, 0.0, 1.0, out=f1)
    np.clip(f2, 0.0, 1.0, out=f2)
    return FlowSample(
        f1,
        f2,
        None if flow is None else np.ascontiguousarray(flow),
        None if mask is None else np.ascontiguousarray(mask),
        sample.sample_id,
    )


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    weights: tuple = DEFAULT_LOSS_WEIGHTS
    alpha: float = 0.25
    epsilon: float = 0.001
    # "clamp" samples the border outside the frame; "mask" drops those pixels
    border: str = "clamp"

    def __post_init__(self):
        LossWeights(self.weights)
        CharbonnierParams(self.alpha, self.epsilon)
        if self.border not in ("clamp", "mask"):
            raise ConfigError(f"border must be 'clamp' or 'mask', got {self.border!r}")

    @property
    def loss_weights(self):
        return LossWeights(self.weights)

    @property
    def charbonnier(self):
        return CharbonnierParams(self.alpha, self.epsilon)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-5
    halve_every: int = 100_000
    max_iters: int = 2000
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 500
    # held-out EPE every this many iterations (0 disables)
    eval_every: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        for name in ("halve_every", "max_iters", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("checkpoint_every", "eval_every", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")

    def scalar_fields(self):
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name not in ("augmentation", "loss")}

    def to_lines(self):
        lines = [f"train.{k} = {format_value(v)}" for k, v in self.scalar_fields().items()]
        return lines + dataclass_lines(self.augmentation, "aug") + dataclass_lines(self.loss, "loss")


# -- logging ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrainRecord:
    iteration: int
    lr: float
    loss: float
    scales: tuple
    epe: float | None = None

    def format(self):
        scales = ",".join(f"{s:.9e}" for s in self.scales)
        line = f"iter {self.iteration} lr {self.lr:.6e} loss {self.loss:.9e} scales {scales}"
        if self.epe is not None:
            line += f" epe {self.epe:.6f}"
        return line

    @classmethod
    def parse(cls, line):
        tok = line.split()
        if len(tok) not in (8, 10) or tok[0::2][:4] != ["iter", "lr", "loss", "scales"]:
            raise ValueError(f"not a training record: {line!r}")
        epe = float(tok[9]) if len(tok) == 10 else None
        return cls(int(tok[1]), float(tok[3]), float(tok[5]),
                   tuple(float(s) for s in tok[7].split(",")), epe)


def read_log(path):
    """Training records of a log file, skipping ``#`` header lines."""
    with open(path, encoding="utf-8") as fh:
        return [TrainRecord.parse(line) for line in fh if line.strip() and not line.startswith("#")]


def trim_log(path, keep_below):
    """Drop records with iteration >= ``keep_below`` (used when resuming)."""
    if not os.path.exists(path):
        return
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    kept = [ln for ln in lines if ln.startswith("#") or not ln.strip()
            or TrainRecord.parse(ln).iteration < keep_below]
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(kept)


def smoothed(values, beta=0.9):
    """Bias-corrected exponential moving average of a sequence."""
    out = []
    acc = 0.0
    for i, v in enumerate(values, start=1):
        acc = beta * acc + (1.0 - beta) * v
        out.append(acc / (1.0 - beta**i))
    return out


# -- checkpoints -------------------------------------------------------------------


def make_checkpoint(net: Network, adam: AdamState, iteration, seed):
    meta = {"rng": {"generator": "PCG64", "seeding": "default_rng([seed, iteration])", "seed": seed}}
    return Checkpoint(
        config=net.config,
        params={k: p.data for k, p in net.params.items()},
        buffers=dict(net.buffers()),
        adam_m=dict(adam.m),
        adam_v=dict(adam.v),
        adam_t=adam.t,
        iteration=iteration,
        meta=meta,
    )


def restore_network(net: Network, ckpt: Checkpoint):
    """Copy parameters and batch-norm statistics from ``ckpt`` into ``net``."""
    if set(ckpt.params) != set(net.params):
        missing = sorted(set(net.params) - set(ckpt.params))
        extra = sorted(set(ckpt.params) - set(net.params))
        raise ValueError(f"checkpoint parameters do not match the network (missing {missing[:3]}, extra {extra[:3]})")
    for name, p in net.params.items():
        if p.shape != ckpt.params[name].shape:
            raise ValueError(f"{name}: shape {ckpt.params[name].shape} in checkpoint, {p.shape} in network")
        p.data[...] = ckpt.params[name]
    for name, st in net.bn_states.items():
        st.running_mean[...] = ckpt.buffers[f"{name}.norm.running_mean"]
        st.running_var[...] = ckpt.buffers[f"{name}.norm.running_var"]
    return net


# stream of the (seed, stream) generator family reserved for weight init;
# iteration streams count up from 0 and never reach it
INIT_STREAM = 2**32 - 1


def init_network(config, seed, dtype=np.float32):
    """Fresh network whose weights are a function of ``seed`` alone."""
    return build(config, rng=np.random.default_rng([seed, INIT_STREAM]), dtype=dtype)


def network_from_checkpoint(ckpt: Checkpoint, dtype=np.float32):
    return restore_network(build(ckpt.config, dtype=dtype), ckpt)


# -- training loop ------------------------------------------------------------------


class NonFiniteLossError(RuntimeError):
    def __init__(self, iteration, loss, scales):
        self.iteration = iteration
        self.loss = loss
        self.scales = tuple(scales)
        detail = ",".join(f"{s:.6e}" for s in self.scales)
        super().__init__(f"non-finite loss {loss} at iteration {iteration} (scales {detail})")


@dataclass
class TrainResult:
    records: list
    final_checkpoint: Path | None
    iteration: int


def _batch(samples, cfg: TrainConfig, rng):
    idx = rng.integers(0, len(samples), size=cfg.batch_size)
    return stack_frames([augment(samples[i], cfg.augmentation, rng) for i in idx])


def train_step(net, adam, frames, cfg: TrainConfig, iteration, rng):
    """One forward/backward/update; returns the record without EPE."""
    f1, f2 = frames
    pyramid = net.forward(f1, f2, training=True, rng=rng)
    loss, scales = multiscale_loss(pyramid, f1, f2, cfg.loss.loss_weights, cfg.loss.charbonnier,
                                   border=cfg.loss.border, per_scale=True)
    total = float(loss.data)
    lr = lr_at(iteration, cfg)
    if not (math.isfinite(total) and all(math.isfinite(s) for s in scales)):
        raise NonFiniteLossError(iteration, total, scales)
    net.zero_grad()
    loss.backward()
    adam_step({k: p.data for k, p in net.params.items()},
              {k: p.grad for k, p in net.params.items()}, adam, lr)
    return TrainRecord(iteration, lr, total, tuple(scales))


def train(samples, cfg: TrainConfig, net: Network, out_dir, heldout=None, resume=None,
          header_lines=(), progress=None):
    """Run ``cfg.max_iters`` iterations, appending records to ``out_dir/train.log``.

    Ground truth in ``samples`` is discarded before training starts.  With
    ``resume`` (a checkpoint path) parameters, statistics and Adam moments
    are restored and training continues at the stored iteration.  A final
    checkpoint is written on completion and on KeyboardInterrupt.
    """
    samples = [s.without_gt() for s in samples]
    if not samples:
        raise ValueError("training set is empty")
    net.check_input((cfg.batch_size, *samples[0].frame1.shape))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train.log"
    adam = AdamState.zeros_like({k: p.data for k, p in net.params.items()})
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, expected_config=net.config)
        stored_seed = ckpt.meta.get("rng", {}).get("seed")
        if stored_seed != cfg.seed:
            raise ConfigError(f"resume seed {cfg.seed} differs from checkpoint seed {stored_seed}")
        restore_network(net, ckpt)
        adam.m = {k: v.astype(net.dtype) for k, v in ckpt.adam_m.items()}
        adam.v = {k: v.astype(net.dtype) for k, v in ckpt.adam_v.items()}
        adam.t = ckpt.adam_t
        start = ckpt.iteration
        trim_log(log_path, start)
    else:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.writelines(f"# {line}\n" for line in header_lines)

    records = []
    it = start
    final = out_dir / "final.dfw"
    try:
        with open(log_path, "a", encoding="utf-8") as log:
            while it < cfg.max_iters:
                rng = np.random.default_rng([cfg.seed, it])
                frames = _batch(samples, cfg, rng)
                try:
                    rec = train_step(net, adam, frames, cfg, it, rng)
                except NonFiniteLossError as exc:
                    bad = TrainRecord(it, lr_at(it, cfg), exc.loss, exc.scales)
                    log.write(bad.format() + "\n")
                    log.flush()
                    raise
                done = it + 1
                if heldout is not None and cfg.eval_every and done % cfg.eval_every == 0:
                    rec = TrainRecord(rec.iteration, rec.lr, rec.loss, rec.scales,
                                      evaluate_network(net, heldout).mean_epe)
                log.write(rec.format() + "\n")
                log.flush()
                records.append(rec)
                it = done
                if progress is not None:
                    progress(rec)
                if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.max_iters:
                    save_checkpoint(out_dir / f"checkpoint_{done:07d}.dfw",
                                    make_checkpoint(net, adam, done, cfg.seed))
    except KeyboardInterrupt:
        save_checkpoint(final, make_checkpoint(net, adam, it, cfg.seed))
        raise
    save_checkpoint(final, make_checkpoint(net, adam, it, cfg.seed))
    return TrainResult(records, final, it)
