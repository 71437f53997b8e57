"""Image and altitude evaluation metrics."""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Optional

import numpy as np

from rpckit.errors import DimMismatch, EmptyMask
from rpckit.losses import ssim

DEFAULT_THRESHOLDS = (2.5, 5.0, 7.5)
PROSE_THRESHOLDS = (1.0, 2.5, 7.5)


def psnr(pred, gt, mask=None) -> float:
    """10 log10(1 / MSE) for [0, 1] images; +inf when identical."""
    pred = np.asarray(pred, float)
    gt = np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise DimMismatch(f"shape mismatch: {pred.shape} vs {gt.shape}")
    err = (pred - gt) ** 2
    if mask is not None:
        m = np.asarray(mask, bool)
        if not m.any():
            raise EmptyMask("no valid pixels for PSNR")
        err = err[m]
    mse = float(np.mean(err))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def threshold_key(t: float) -> str:
    return "pct_below_" + f"{t:g}".replace(".", "_")


@dataclasses.dataclass
class MetricReport:
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    mae: Optional[float] = None
    me: Optional[float] = None
    pct_below: dict = dataclasses.field(default_factory=dict)
    valid_pixel_count: int = 0

    def to_dict(self) -> dict:
        out = {
            "psnr": "inf" if self.psnr == math.inf else self.psnr,
            "ssim": self.ssim,
            "lpips": "n/a",
            "mae": self.mae,
            "me": self.me,
        }
        for t in sorted(self.pct_below):
            out[threshold_key(t)] = self.pct_below[t]
        out["valid_pixel_count"] = self.valid_pixel_count
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        p = d.get("psnr")
        pct = {}
        for k, v in d.items():
            if k.startswith("pct_below_"):
                pct[float(k[len("pct_below_"):].replace("_", "."))] = v
        return cls(math.inf if p == "inf" else p, d.get("ssim"), d.get("mae"), d.get("me"), pct,
                   int(d.get("valid_pixel_count", 0)))


def height_errors(pred_height, gt_height, gt_mask=None) -> np.ndarray:
    pred_height = np.asarray(pred_height, float)
    gt_height = np.asarray(gt_height, float)
    if pred_height.shape != gt_height.shape:
        raise DimMismatch(f"height shapes differ: {pred_height.shape} vs {gt_height.shape}")
    valid = np.isfinite(gt_height) & np.isfinite(pred_height)
    if gt_mask is not None:
        if np.shape(gt_mask) != gt_height.shape:
            raise DimMismatch("NO-DATA mask dims differ from height")
        valid &= np.asarray(gt_mask, bool)
    if not valid.any():
        raise EmptyMask("no valid ground-truth height cells")
    return np.abs(pred_height[valid] - gt_height[valid])


def compute_metrics(pred_img=None, gt_img=None, pred_height=None, gt_height=None, gt_mask=None,
                    thresholds=DEFAULT_THRESHOLDS) -> MetricReport:
    """Image metrics when both images are given, height metrics when both heights are.

    ``gt_mask`` is True on valid ground-truth height cells; NaN cells in
    ``gt_height`` are treated as NO-DATA too.
    """
    report = MetricReport()
    if pred_img is not None and gt_img is not None:
        pred_img = np.asarray(pred_img, float)
        gt_img = np.asarray(gt_img, float)
        if pred_img.shape != gt_img.shape:
            raise DimMismatch(f"image shapes differ: {pred_img.shape} vs {gt_img.shape}")
        report.psnr = psnr(pred_img, gt_img)
        report.ssim = ssim(pred_img, gt_img)
    if pred_height is not None and gt_height is not None:
        err = height_errors(pred_height, gt_height, gt_mask)
        report.mae = float(np.mean(err))
        report.me = float(np.median(err))
        report.pct_below = {float(t): float(100.0 * np.count_nonzero(err < t) / err.size)
                            for t in sorted(thresholds)}
        report.valid_pixel_count = int(err.size)
    return report
