"""Frame pairs and the on-disk dataset directory layout.

A dataset directory holds, per sample ``NNNNN``::

    NNNNN_img1.ppm   NNNNN_img2.ppm   NNNNN_flow.flo   NNNNN_valid.pgm

The flow and mask files are optional; training never reads them.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .formats import read_flo, read_mask, read_ppm, write_flo, write_mask, write_ppm

_SAMPLE_RE = re.compile(r"^(\d{5})_img1\.ppm$")


@dataclass(frozen=True, eq=False)
class FlowSample:
    """Image pair with optional ground truth.

    Frames are float32 (3, H, W) in [0, 1]; ``gt_flow`` is (2, H, W) and
    ``valid_mask`` is bool (H, W).
    """

    frame1: np.ndarray
    frame2: np.ndarray
    gt_flow: np.ndarray | None = None
    valid_mask: np.ndarray | None = None
    sample_id: str = ""

    def __post_init__(self):
        if self.frame1.shape != self.frame2.shape:
            raise ValueError(f"frame shapes differ: {self.frame1.shape} vs {self.frame2.shape}")
        if self.frame1.ndim != 3:
            raise ValueError(f"frames must be (C, H, W), got {self.frame1.shape}")
        hw = self.frame1.shape[1:]
        if self.gt_flow is not None and self.gt_flow.shape != (2, *hw):
            raise ValueError(f"gt_flow shape {self.gt_flow.shape} does not match frames {hw}")
        if self.valid_mask is not None and self.valid_mask.shape != hw:
            raise ValueError(f"valid_mask shape {self.valid_mask.shape} does not match frames {hw}")

    @property
    def shape(self):
        return self.frame1.shape[1:]

    @property
    def has_gt(self):
        return self.gt_flow is not None

    def without_gt(self):
        return replace(self, gt_flow=None, valid_mask=None)


def sample_ids(root):
    ids = sorted(m.group(1) for name in os.listdir(root) if (m := _SAMPLE_RE.match(name)))
    if not ids:
        raise FileNotFoundError(f"no NNNNN_img1.ppm samples in {root}")
    return ids


def load_sample(root, sample_id, with_gt=True):
    root = Path(root)
    f1 = read_ppm(root / f"{sample_id}_img1.ppm")
    f2 = read_ppm(root / f"{sample_id}_img2.ppm")
    flow = mask = None
    if with_gt:
        flow_path = root / f"{sample_id}_flow.flo"
        mask_path = root / f"{sample_id}_valid.pgm"
        if flow_path.exists():
            flow = read_flo(flow_path)
        if mask_path.exists():
            mask = read_mask(mask_path)
    return FlowSample(f1, f2, flow, mask, sample_id)


def load_dataset(root, with_gt=True):
    """All samples of a dataset directory in id order."""
    return [load_sample(root, sid, with_gt) for sid in sample_ids(root)]


def save_sample(root, sample: FlowSample, sample_id):
    root = Path(root)
    write_ppm(root / f"{sample_id}_img1.ppm", sample.frame1)
    write_ppm(root / f"{sample_id}_img2.ppm", sample.frame2)
    if sample.gt_flow is not None:
        write_flo(root / f"{sample_id}_flow.flo", sample.gt_flow)
    if sample.valid_mask is not None:
        write_mask(root / f"{sample_id}_valid.pgm", sample.valid_mask)


def save_dataset(root, samples):
    os.makedirs(root, exist_ok=True)
    for i, sample in enumerate(samples):
        save_sample(root, sample, f"{i:05d}")


def stack_frames(samples):
    """List of samples -> two (N, 3, H, W) float32 batches."""
    f1 = np.stack([s.frame1 for s in samples]).astype(np.float32)
    f2 = np.stack([s.frame2 for s in samples]).astype(np.float32)
    return f1, f2
