"""Endpoint error, the zero-flow baseline and inference on arbitrary sizes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad


@dataclass(frozen=True)
class SampleError:
    sample_id: str
    pixels: int
    epe_sum: float

    @property
    def epe(self):
        return self.epe_sum / self.pixels


@dataclass(frozen=True)
class EpeReport:
    """Mean endpoint error over all evaluated pixels, with per-sample rows."""

    mean_epe: float
    pixel_count: int
    samples: list = field(default_factory=list)

    @classmethod
    def combine(cls, rows):
        """Pixel-weighted reduction; independent of row order up to rounding."""
        rows = list(rows)
        if not rows:
            raise ValueError("no samples to evaluate")
        total = sum(r.pixels for r in rows)
        epe_sum = float(np.sum([r.epe_sum for r in rows], dtype=np.float64))
        return cls(epe_sum / total, total, rows)

    def table(self):
        """Aligned text: one row per sample and a totals footer."""
        header = ("sample", "pixels", "epe")
        body = [(r.sample_id, str(r.pixels), f"{r.epe:.6f}") for r in self.samples]
        footer = ("total", str(self.pixel_count), f"{self.mean_epe:.6f}")
        rows = [header, *body, footer]
        widths = [max(len(row[i]) for row in rows) for i in range(3)]

        def fmt(row):
            return f"{row[0]:<{widths[0]}}  {row[1]:>{widths[1]}}  {row[2]:>{widths[2]}}"

        rule = "-" * len(fmt(header))
        return "\n".join([fmt(header), rule, *(fmt(r) for r in body), rule, fmt(footer)]) + "\n"


def _endpoint_errors(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[0] != 2:
        raise ValueError(f"flow shapes must match as (2, H, W): {pred.shape} vs {gt.shape}")
    err = np.sqrt(np.sum((pred - gt) ** 2, axis=0))
    if mask is None:
        return err.ravel()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != err.shape:
        raise ValueError(f"mask shape {mask.shape} does not match flow {err.shape}")
    if not mask.any():
        raise ValueError("mask selects no pixels")
    return err[mask]


def sample_error(pred, gt, mask=None, sample_id=""):
    errs = _endpoint_errors(pred, gt, mask)
    return SampleError(sample_id, int(errs.size), float(errs.sum()))


def epe(pred, gt, mask=None):
    """Mean of sqrt((u - u*)^2 + (v - v*)^2) over (masked) pixels."""
    return EpeReport.combine([sample_error(pred, gt, mask)])


def _require_gt(samples):
    samples = list(samples)
    if not samples:
        raise ValueError("dataset is empty")
    missing = [s.sample_id for s in samples if s.gt_flow is None]
    if missing:
        raise ValueError(f"samples without ground truth: {', '.join(missing[:5])}")
    return samples


def evaluate_predictions(samples, predictions):
    """EPE of ``predictions`` (list of (2, H, W)) against each sample's GT."""
    samples = _require_gt(samples)
    if len(predictions) != len(samples):
        raise ValueError(f"{len(predictions)} predictions for {len(samples)} samples")
    return EpeReport.combine(
        sample_error(p, s.gt_flow, s.valid_mask, s.sample_id) for p, s in zip(predictions, samples)
    )


def zero_flow_baseline(samples):
    """EPE of the all-zero predictor, i.e. the mean GT magnitude."""
    samples = _require_gt(samples)
    return evaluate_predictions(samples, [np.zeros_like(s.gt_flow) for s in samples])


def pad_to_multiple(frames, divisor):
    """Replicate-pad (N, C, H, W) at the bottom and right up to a multiple of ``divisor``."""
    h, w = frames.shape[-2:]
    ph = (-h) % divisor
    pw = (-w) % divisor
    if ph == 0 and pw == 0:
        return frames
    return np.pad(frames, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")


def predict_flow(net, frame1, frame2, batch_size=8):
    """Finest-level flow for (N, 3, H, W) or (3, H, W) frames at any extent.

    Inputs are padded by border replication up to the network's divisor and
    the prediction is cropped back, so the result matches the input size.
    """
    single = np.ndim(frame1) == 3
    f1 = np.asarray(frame1, dtype=net.dtype)
    f2 = np.asarray(frame2, dtype=net.dtype)
    if single:
        f1, f2 = f1[None], f2[None]
    if f1.shape != f2.shape:
        raise ValueError(f"frame shapes differ: {f1.shape} vs {f2.shape}")
    h, w = f1.shape[-2:]
    div = net.config.size_divisor
    p1, p2 = pad_to_multiple(f1, div), pad_to_multiple(f2, div)
    out = []
    with no_grad():
        for start in range(0, len(p1), batch_size):
            pyramid = net.forward(p1[start:start + batch_size], p2[start:start + batch_size], training=False)
            out.append(pyramid[-1].data[:, :, :h, :w])
    flow = np.concatenate(out).astype(np.float32)
    return flow[0] if single else flow


def evaluate_network(net, samples, batch_size=8):
    samples = _require_gt(samples)
    f1 = np.stack([s.frame1 for s in samples])
    f2 = np.stack([s.frame2 for s in samples])
    preds = predict_flow(net, f1, f2, batch_size)
    return evaluate_predictions(samples, list(preds))
