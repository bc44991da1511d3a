"""Forward evaluation of the intensity field and its analytic gradients.

The field value at a query point x is the sum of local Gaussian
contributions

    I(x) = sum_i alpha_i * exp(-0.5 (x - mu_i)^T P_i (x - mu_i))

restricted to the partition-grid neighborhood of x.  The backward pass
differentiates this w.r.t. every primitive parameter (position,
quaternion, log-scale, intensity logit) and the per-slice rigid
transforms, accumulating in float64 throughout.  Evaluation order is
fixed, so repeated runs are bit-identical.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import (
    LOG_SCALE_LIMIT,
    GaussianField,
    TransformSet,
    Volume,
    normalize_quat,
    quat_to_rotation,
    sigmoid,
)
from .errors import InconsistentGrid, OutOfMemoryRequest
from .spatial import PartitionGrid

MAX_VOLUME_VOXELS = 2**27  # refuse to allocate volumes beyond this
_MIN_POINTS_PER_THREAD = 1024

_EMPTY_ROT = np.zeros((1, 3, 3))
_EMPTY_TRANS = np.zeros((1, 3))

_num_threads = 1


def set_num_threads(n):
    """Worker count for the render kernels.

    Results are bit-reproducible for a fixed count: the point range is
    split into fixed contiguous chunks and per-primitive accumulators are
    reduced in thread order.  One thread reproduces the fully sequential
    reduction.
    """
    global _num_threads
    _num_threads = max(1, int(n))


def get_num_threads():
    return _num_threads


def _chunk_bounds(n_points, threads):
    t = min(threads, max(1, n_points // _MIN_POINTS_PER_THREAD))
    edges = np.linspace(0, n_points, t + 1).astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run_threaded(bounds, worker):
    if len(bounds) == 1:
        worker(0, *bounds[0])
        return
    threads = [
        threading.Thread(target=worker, args=(t, lo, hi))
        for t, (lo, hi) in enumerate(bounds)
    ]
    for th in threads:
        th.start()
    for th in threads:
        th.join()


@dataclass
class RenderBatch:
    points: np.ndarray  # (B, 3) post-transform query coordinates
    intensities: np.ndarray  # (B,)
    contributor_counts: np.ndarray  # (B,) int64


@dataclass
class RenderGradients:
    d_positions: np.ndarray  # (N, 3)
    d_quaternions: np.ndarray  # (N, 4)
    d_log_scales: np.ndarray  # (N, 3)
    d_intensity_logits: np.ndarray  # (N,)
    d_transform_params: np.ndarray  # (K, 7): 4 quaternion + 3 translation
    d_points: np.ndarray  # (B, 3) w.r.t. transformed query coordinates


def _as_batch(samples):
    """Normalize sample input to (coords (B,3), slice_ids (B,) int64)."""
    if hasattr(samples, "coords"):
        coords = np.ascontiguousarray(samples.coords, dtype=np.float64)
        sids = getattr(samples, "slice_ids", None)
        if sids is None:
            sids = np.full(coords.shape[0], -1, dtype=np.int64)
        return coords, np.ascontiguousarray(sids, dtype=np.int64)
    if isinstance(samples, np.ndarray):
        coords = np.ascontiguousarray(samples, dtype=np.float64).reshape(-1, 3)
        return coords, np.full(coords.shape[0], -1, dtype=np.int64)
    # list of SamplePoint-like objects
    coords = np.array([np.asarray(s.coord, dtype=np.float64) for s in samples])
    sids = np.array([getattr(s, "slice_id", -1) for s in samples], dtype=np.int64)
    return coords.reshape(-1, 3), sids


def _as_transforms(transforms):
    if transforms is None:
        return None
    if isinstance(transforms, TransformSet):
        return transforms
    return TransformSet.from_list(list(transforms))


def activated_parameters(field: GaussianField):
    """Per-primitive quantities entering the forward sum.

    Returns (unit quats, rotations, inverse variances, packed precisions,
    alphas).  Log-scales are clamped to |s| <= 20 before exponentiation;
    the clamp passes zero gradient outside its range.
    """
    qn = normalize_quat(field.quaternions)
    rot = quat_to_rotation(qn)
    s = np.clip(field.log_scales, -LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)
    inv_var = np.exp(-2.0 * s)
    prec = np.matmul(rot * inv_var[:, None, :], rot.transpose(0, 2, 1))
    prec6 = np.empty((field.count, 6))
    prec6[:, 0] = prec[:, 0, 0]
    prec6[:, 1] = prec[:, 0, 1]
    prec6[:, 2] = prec[:, 0, 2]
    prec6[:, 3] = prec[:, 1, 1]
    prec6[:, 4] = prec[:, 1, 2]
    prec6[:, 5] = prec[:, 2, 2]
    alpha = sigmoid(field.intensity_logits)
    return qn, rot, inv_var, prec6, alpha


def _check_grid(field, grid):
    if grid.count != field.count:
        raise InconsistentGrid(
            f"grid indexes {grid.count} primitives, field holds {field.count}"
        )


def _transform_arrays(transforms):
    ts = _as_transforms(transforms)
    if ts is None or len(ts) == 0:
        return _EMPTY_ROT, _EMPTY_TRANS, 0
    return np.ascontiguousarray(ts.rotations()), np.ascontiguousarray(
        ts.translations, dtype=np.float64
    ), len(ts)


def render_points(field, grid, transforms, samples, radius=None, prepared=None):
    """Evaluate I at every sample, after the per-slice rigid transform.

    ``prepared`` may carry the result of :func:`activated_parameters` for
    this field to avoid recomputing it across calls within one step.
    """
    _check_grid(field, grid)
    coords, sids = _as_batch(samples)
    rot_t, trans_t, _ = _transform_arrays(transforms)
    _, _, _, prec6, alpha = prepared if prepared is not None else activated_parameters(field)
    r = grid.block_radius if radius is None else int(radius)
    b = coords.shape[0]
    intensities = np.zeros(b)
    counts = np.zeros(b, dtype=np.int64)
    transformed = np.zeros((b, 3))
    positions = np.ascontiguousarray(field.positions, dtype=np.float64)

    def worker(_t, lo, hi):
        _kernels.block_forward(
            coords[lo:hi], sids[lo:hi], rot_t, trans_t, positions, prec6, alpha,
            grid.cell_starts, grid.cell_indices, grid.grid_resolution, r,
            intensities[lo:hi], counts[lo:hi], transformed[lo:hi],
        )

    _run_threaded(_chunk_bounds(b, _num_threads), worker)
    return RenderBatch(points=transformed, intensities=intensities,
                       contributor_counts=counts)


def render_points_dense(field, samples, transforms=None):
    """Reference evaluation over all primitives (no spatial truncation)."""
    coords, sids = _as_batch(samples)
    rot_t, trans_t, _ = _transform_arrays(transforms)
    if transforms is not None:
        rotated = np.einsum("kij,bj->bi", rot_t[sids.clip(min=0)], coords)
        coords = np.where(sids[:, None] >= 0, rotated + trans_t[sids.clip(min=0)], coords)
    _, _, _, prec6, alpha = activated_parameters(field)
    out = np.zeros(coords.shape[0])
    _kernels.dense_forward(
        np.ascontiguousarray(coords),
        np.ascontiguousarray(field.positions, dtype=np.float64),
        prec6, alpha, out,
    )
    return out


def _rotation_quat_grad(g_rot, qn):
    """Chain a (M,3,3) rotation-matrix gradient to the unit quaternion.

    Uses the closed-form partials of the quaternion->matrix map; the
    caller still has to project through the normalization q / ||q||.
    """
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = g_rot
    dw = 2.0 * (
        -z * g[:, 0, 1] + y * g[:, 0, 2]
        + z * g[:, 1, 0] - x * g[:, 1, 2]
        - y * g[:, 2, 0] + x * g[:, 2, 1]
    )
    dx = 2.0 * (
        y * g[:, 0, 1] + z * g[:, 0, 2]
        + y * g[:, 1, 0] - 2.0 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2.0 * x * g[:, 2, 2]
    )
    dy = 2.0 * (
        -2.0 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
        + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2.0 * y * g[:, 2, 2]
    )
    dz = 2.0 * (
        -2.0 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
        + w * g[:, 1, 0] - 2.0 * z * g[:, 1, 1] + y * g[:, 1, 2]
        + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=1)


def _project_through_normalization(g_qhat, q_raw):
    """Gradient w.r.t. raw q given the gradient w.r.t. q / ||q||."""
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    qn = q_raw / norm
    inner = np.sum(g_qhat * qn, axis=1, keepdims=True)
    return (g_qhat - inner * qn) / norm


def transform_grads_from_points(transforms, coords, sids, d_points):
    """Chain per-point gradients w.r.t. transformed coordinates into the
    per-slice rigid parameters.  Returns (K, 7): 4 quaternion + 3 translation."""
    ts = _as_transforms(transforms)
    if ts is None or len(ts) == 0:
        return np.zeros((0, 7))
    n_slices = len(ts)
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    sids = np.asarray(sids, dtype=np.int64).reshape(-1)
    d_points = np.asarray(d_points, dtype=np.float64).reshape(-1, 3)
    valid = sids >= 0
    sv = sids[valid]
    h = d_points[valid]
    c = coords[valid]
    d_trans = np.zeros((n_slices, 3))
    g_rott = np.zeros((n_slices, 3, 3))
    for a in range(3):
        d_trans[:, a] = np.bincount(sv, weights=h[:, a], minlength=n_slices)
        for bx in range(3):
            g_rott[:, a, bx] = np.bincount(
                sv, weights=h[:, a] * c[:, bx], minlength=n_slices
            )
    qt = normalize_quat(ts.quats)
    d_tq = _project_through_normalization(_rotation_quat_grad(g_rott, qt), ts.quats)
    out = np.zeros((n_slices, 7))
    out[:, :4] = d_tq
    out[:, 4:] = d_trans
    return out


def render_backward(field, grid, transforms, samples, upstream, radius=None,
                    prepared=None):
    """Gradients of sum_b upstream[b] * I(x_b) for all parameter groups.

    Primitives outside every query neighborhood receive exactly zero
    gradient.  Quaternion gradients flow through the normalization step
    (projected gradient of q / ||q||); log-scale gradients are zero where
    the forward clamp at |s| = 20 is active.
    """
    _check_grid(field, grid)
    coords, sids = _as_batch(samples)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64).reshape(-1)
    if upstream.shape[0] != coords.shape[0]:
        raise ValueError("upstream length does not match sample count")
    rot_t, trans_t, n_slices = _transform_arrays(transforms)
    qn, rot, inv_var, prec6, alpha = (
        prepared if prepared is not None else activated_parameters(field)
    )
    r = grid.block_radius if radius is None else int(radius)

    n = field.count
    d_points = np.zeros((coords.shape[0], 3))
    positions = np.ascontiguousarray(field.positions, dtype=np.float64)
    bounds = _chunk_bounds(coords.shape[0], _num_threads)
    bufs = [
        (np.zeros((n, 3)), np.zeros((n, 6)), np.zeros(n)) for _ in bounds
    ]

    def worker(t, lo, hi):
        bm, ba, bl = bufs[t]
        _kernels.block_backward(
            coords[lo:hi], sids[lo:hi], rot_t, trans_t, positions, prec6, alpha,
            grid.cell_starts, grid.cell_indices, grid.grid_resolution, r,
            upstream[lo:hi], bm, ba, bl, d_points[lo:hi],
        )

    _run_threaded(bounds, worker)
    d_mu, d_abar6, d_alpha = bufs[0]
    for bm, ba, bl in bufs[1:]:  # fixed-order reduction
        d_mu += bm
        d_abar6 += ba
        d_alpha += bl

    # dL/dPrecision as full symmetric matrices.
    abar = np.empty((n, 3, 3))
    abar[:, 0, 0] = d_abar6[:, 0]
    abar[:, 0, 1] = abar[:, 1, 0] = d_abar6[:, 1]
    abar[:, 0, 2] = abar[:, 2, 0] = d_abar6[:, 2]
    abar[:, 1, 1] = d_abar6[:, 3]
    abar[:, 1, 2] = abar[:, 2, 1] = d_abar6[:, 4]
    abar[:, 2, 2] = d_abar6[:, 5]

    # Precision = R diag(e) R^T with e = exp(-2 s):
    #   dL/de_k = (R^T Abar R)_kk,  dL/ds_k = -2 e_k dL/de_k
    #   dL/dR = 2 Abar R diag(e)
    ar = np.einsum("nij,njk->nik", abar, rot)
    d_e = np.einsum("nji,njk->nik", rot, ar)[:, (0, 1, 2), (0, 1, 2)]
    d_log_scales = -2.0 * inv_var * d_e
    clamped = np.abs(field.log_scales) > LOG_SCALE_LIMIT
    d_log_scales[clamped] = 0.0
    g_rot = 2.0 * ar * inv_var[:, None, :]
    d_qhat = _rotation_quat_grad(g_rot, qn)
    d_quaternions = _project_through_normalization(d_qhat, field.quaternions)

    d_logits = d_alpha * alpha * (1.0 - alpha)

    if n_slices:
        d_transform_params = transform_grads_from_points(transforms, coords, sids, d_points)
    else:
        d_transform_params = np.zeros((0, 7))

    return RenderGradients(
        d_positions=d_mu,
        d_quaternions=d_quaternions,
        d_log_scales=d_log_scales,
        d_intensity_logits=d_logits,
        d_transform_params=d_transform_params,
        d_points=d_points,
    )


def grid_coordinates(dims, bounds):
    """Node-inclusive sample coordinates for each axis.

    For n >= 2 the n nodes span [lo, hi] inclusive with spacing
    (hi - lo) / (n - 1); a single node sits at the midpoint.
    """
    lo, hi = bounds
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    axes = []
    spacing = np.empty(3)
    for a in range(3):
        n = int(dims[a])
        if n == 1:
            axes.append(np.array([0.5 * (lo[a] + hi[a])]))
            spacing[a] = hi[a] - lo[a]
        else:
            spacing[a] = (hi[a] - lo[a]) / (n - 1)
            axes.append(lo[a] + np.arange(n) * spacing[a])
    return axes, spacing


def sample_volume(field, grid, residual, dims, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
                  radius=None, max_voxels=MAX_VOLUME_VOXELS, chunk=65536):
    """Evaluate the field (plus optional residual) on a dense voxel grid.

    Sampling uses node-inclusive coordinates from ``grid_coordinates`` and
    clamps the result to [0, 1].  Raises OutOfMemoryRequest before any
    allocation if the voxel count exceeds ``max_voxels``.
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ValueError("dims must all be >= 1")
    total = dims[0] * dims[1] * dims[2]
    if total > max_voxels:
        raise OutOfMemoryRequest(f"{total} voxels exceed cap {max_voxels}")
    axes, spacing = grid_coordinates(dims, bounds)
    out = np.empty(total)
    gx, gy, gz = np.meshgrid(axes[0], axes[1], axes[2], indexing="ij")
    coords = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    for lo in range(0, total, chunk):
        hi = min(lo + chunk, total)
        block = coords[lo:hi]
        vals = render_points(field, grid, None, block, radius=radius).intensities
        if residual is not None:
            from .nrf import nrf_forward

            vals = vals + nrf_forward(residual, block)
        out[lo:hi] = vals
    data = np.clip(out, 0.0, 1.0).reshape(dims)
    origin = np.array([axes[0][0], axes[1][0], axes[2][0]])
    return Volume(data=data, spacing=spacing, origin=origin)
