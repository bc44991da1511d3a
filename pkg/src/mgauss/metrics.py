"""Reconstruction quality metrics: PSNR, SSIM (volumetric), NCC, NRMSE."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import Volume
from .errors import ConstantInput, ShapeMismatch
from .ssim import ssim_mean


def _as_data(v):
    return v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"volume shapes {a.shape} and {b.shape} differ")


def psnr(pred, gt, peak=1.0):
    """10 log10(peak^2 / MSE), in dB; +inf when the volumes are identical.

    Volumes are expected normalized to unit range, so the peak defaults
    to 1.0.
    """
    p = _as_data(pred)
    g = _as_data(gt)
    _check_shapes(p, g)
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ncc(pred, gt):
    """Pearson correlation over voxels."""
    p = _as_data(pred).ravel()
    g = _as_data(gt).ravel()
    _check_shapes(p, g)
    dp = p - p.mean()
    dg = g - g.mean()
    denom = math.sqrt(float(np.sum(dp * dp)) * float(np.sum(dg * dg)))
    if denom == 0.0:
        raise ConstantInput("correlation undefined for constant input")
    return float(np.sum(dp * dg)) / denom


def nrmse(pred, gt):
    """RMSE normalized by the ground-truth value range."""
    p = _as_data(pred)
    g = _as_data(gt)
    _check_shapes(p, g)
    rng = float(g.max() - g.min())
    if rng == 0.0:
        raise ConstantInput("value range of ground truth is zero")
    return math.sqrt(float(np.mean((p - g) ** 2))) / rng


def ssim3d(pred, gt):
    """Mean SSIM over 11^3 Gaussian windows."""
    p = _as_data(pred)
    g = _as_data(gt)
    return ssim_mean(p, g)


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    ncc: float
    nrmse: float
    runtime_seconds: float = 0.0

    def to_text(self):
        lines = [
            f"psnr_db = {self.psnr_db:.6f}" if math.isfinite(self.psnr_db)
            else "psnr_db = inf",
            f"ssim = {self.ssim:.8f}",
            f"ncc = {self.ncc:.8f}",
            f"nrmse = {self.nrmse:.8f}",
            f"runtime_seconds = {self.runtime_seconds:.3f}",
        ]
        return "\n".join(lines) + "\n"

    def to_json(self):
        d = dict(self.__dict__)
        if not math.isfinite(d["psnr_db"]):
            d["psnr_db"] = "inf"
        return json.dumps(d, indent=2) + "\n"


def evaluate_volumes(pred, gt, runtime_seconds=0.0):
    return MetricReport(
        psnr_db=psnr(pred, gt),
        ssim=ssim3d(pred, gt),
        ncc=ncc(pred, gt),
        nrmse=nrmse(pred, gt),
        runtime_seconds=runtime_seconds,
    )
