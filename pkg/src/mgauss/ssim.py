"""Windowed structural similarity with an analytic gradient.

SSIM is evaluated on fully in-bounds (valid) windows of a separable
Gaussian kernel, so degenerate inputs have exact closed forms.  The same
machinery serves the 2D slice loss during training and the 3D volume
metric; the gradient path is only needed for 2D.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch, SliceTooSmall

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def gaussian_window(size=WINDOW_SIZE, sigma=WINDOW_SIGMA):
    """Normalized 1D Gaussian taps."""
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return w / w.sum()


def _correlate_valid_axis(x, w, axis):
    view = np.lib.stride_tricks.sliding_window_view(x, w.shape[0], axis=axis)
    return np.tensordot(view, w, axes=([-1], [0]))


def correlate_valid(x, w):
    """Separable valid-mode correlation along every axis."""
    out = x
    for axis in range(x.ndim):
        out = _correlate_valid_axis(out, w, axis)
    return out


def correlate_valid_adjoint(u, w):
    """Adjoint of :func:`correlate_valid` (w is symmetric)."""
    pad = w.shape[0] - 1
    out = u
    for axis in range(u.ndim):
        widths = [(0, 0)] * u.ndim
        widths[axis] = (pad, pad)
        out = _correlate_valid_axis(np.pad(out, widths), w, axis)
    return out


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes {a.shape} and {b.shape} differ")
    if min(a.shape) < WINDOW_SIZE:
        raise SliceTooSmall(f"min side {min(a.shape)} < window {WINDOW_SIZE}")


def ssim_mean(pred, target, window=None):
    """Mean SSIM over all valid windows (works for 2D and 3D arrays)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_pair(pred, target)
    w = gaussian_window() if window is None else window
    mu_p = correlate_valid(pred, w)
    mu_t = correlate_valid(target, w)
    var_p = correlate_valid(pred * pred, w) - mu_p**2
    var_t = correlate_valid(target * target, w) - mu_t**2
    cov = correlate_valid(pred * target, w) - mu_p * mu_t
    a1 = 2.0 * mu_p * mu_t + C1
    a2 = 2.0 * cov + C2
    b1 = mu_p**2 + mu_t**2 + C1
    b2 = var_p + var_t + C2
    return float(np.mean((a1 * a2) / (b1 * b2)))


def ssim_loss(pred, target):
    """1 - mean SSIM."""
    return 1.0 - ssim_mean(pred, target)


def ssim_loss_grad(pred, target, window=None):
    """(loss, dloss/dpred) for 2D slices.

    Derivative chains through the three correlation paths the prediction
    feeds (its windowed mean, raw second moment, and cross moment); the
    adjoint correlation pushes each coefficient field back to pixel space.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_pair(pred, target)
    w = gaussian_window() if window is None else window
    mu_p = correlate_valid(pred, w)
    mu_t = correlate_valid(target, w)
    var_p = correlate_valid(pred * pred, w) - mu_p**2
    var_t = correlate_valid(target * target, w) - mu_t**2
    cov = correlate_valid(pred * target, w) - mu_p * mu_t
    a1 = 2.0 * mu_p * mu_t + C1
    a2 = 2.0 * cov + C2
    b1 = mu_p**2 + mu_t**2 + C1
    b2 = var_p + var_t + C2
    denom = b1 * b2
    ssim_map = (a1 * a2) / denom
    loss = 1.0 - float(np.mean(ssim_map))

    # d(1 - mean)/dS = -1/P at each valid pixel.
    u = -1.0 / ssim_map.size
    ds_da1 = a2 / denom
    ds_da2 = a1 / denom
    ds_db1 = -ssim_map / b1
    ds_db2 = -ssim_map / b2
    # sigma_p^2 and cov depend on mu_p as well as on the raw moments.
    g_mu = u * (2.0 * mu_t * ds_da1 + 2.0 * mu_p * ds_db1
                - 2.0 * mu_t * ds_da2 - 2.0 * mu_p * ds_db2)
    g_sqr = u * ds_db2
    g_cross = u * 2.0 * ds_da2
    grad = (
        correlate_valid_adjoint(g_mu, w)
        + correlate_valid_adjoint(g_sqr, w) * 2.0 * pred
        + correlate_valid_adjoint(g_cross, w) * target
    )
    return loss, grad
