"""Synthetic phantoms, thick-slice stack acquisition, and devoxelization.

The simulator stands in for clinical data: it slices a ground-truth volume
into three orthogonal anisotropic stacks with per-slice rigid motion and
noise, then converts the stacks back into the normalized point cloud the
reconstructor trains on.  True per-slice perturbations are recorded so
tests can isolate motion behavior; the "estimated" transforms handed to
the reconstructor are the truth corrupted by a configurable registration
error (zero by default).

World geometry: volumes are axis-aligned in world millimetres (RAS); a
voxel (i, j, k) center sits at origin + (i, j, k) * spacing.  Through-plane
axes per orientation: sagittal -> x, coronal -> y, axial -> z.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .core import (
    RigidTransform,
    TransformSet,
    Volume,
    quat_from_euler,
    quat_multiply,
    quat_to_rotation,
)
from .errors import EmptyForeground, GeometryMismatch
from .train import SliceGrid

ORIENT_THROUGH = {"sagittal": 0, "coronal": 1, "axial": 2}
FWHM_TO_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))
NORMALIZED_HALF_SPAN = 0.98  # longest world axis maps to [-0.98, 0.98]


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------


@dataclass
class PhantomParams:
    """Closed-form phantom description, deterministic in the seed."""

    kind: str
    outer_center: np.ndarray
    outer_axes: np.ndarray
    base_value: float
    base_ramp: float
    shell_center: np.ndarray
    shell_radius: float
    shell_half_width: float
    shell_value: float
    inner_center: np.ndarray
    inner_axes: np.ndarray
    inner_value: float
    texture_amp: float
    texture_freq: float
    deep_center: np.ndarray
    deep_axes: np.ndarray
    deep_value: float
    checker_freq: float = 2.0
    checker_hi: float = 0.7
    checker_lo: float = 0.3
    core_radius: float = 0.25
    core_value: float = 0.5
    core_ramp: float = 0.3


def phantom_params(kind, seed):
    rng = np.random.default_rng(seed)
    j = rng.uniform(-1.0, 1.0, size=16)
    return PhantomParams(
        kind=kind,
        outer_center=np.array([0.02 * j[0], 0.02 * j[1], 0.02 * j[2]]),
        outer_axes=np.array([0.80, 0.72, 0.64]) * (1.0 + 0.04 * j[3:6]),
        base_value=0.32 + 0.03 * j[6],
        base_ramp=0.18,
        shell_center=np.array([0.05 * j[7], 0.05 * j[8], 0.05 * j[9]]),
        shell_radius=0.46 + 0.02 * j[10],
        shell_half_width=0.035,
        shell_value=0.95,
        inner_center=np.array([0.16 + 0.03 * j[11], -0.10, 0.08]),
        inner_axes=np.array([0.30, 0.26, 0.24]),
        inner_value=0.72,
        texture_amp=0.08,
        texture_freq=4.0,
        deep_center=np.array([-0.28, 0.20 + 0.03 * j[12], -0.12]),
        deep_axes=np.array([0.16, 0.18, 0.15]),
        deep_value=0.55,
        checker_freq=2.0,
        checker_hi=0.68 + 0.02 * j[13],
        checker_lo=0.30,
        core_radius=0.24,
        core_value=0.52,
        core_ramp=0.28,
    )


def _voxel_center_axes(dims):
    return [(-1.0 + (np.arange(n) + 0.5) * (2.0 / n)) for n in dims]


def make_phantom(kind, dims, seed=0, spacing=1.0):
    """Deterministic test volume in [0, 1] with smooth regions, sharp
    boundaries, and a thin shell; background outside the outer surface is
    exactly zero.  ``kind`` is "nested-ellipsoids" or "checker-shell"."""
    dims = tuple(int(d) for d in dims)
    if any(d < 16 for d in dims):
        raise ValueError("phantom dims must each be >= 16")
    p = phantom_params(kind, seed)
    ax = _voxel_center_axes(dims)
    ux, uy, uz = np.meshgrid(ax[0], ax[1], ax[2], indexing="ij")

    if kind == "nested-ellipsoids":
        rho0 = np.sqrt(
            ((ux - p.outer_center[0]) / p.outer_axes[0]) ** 2
            + ((uy - p.outer_center[1]) / p.outer_axes[1]) ** 2
            + ((uz - p.outer_center[2]) / p.outer_axes[2]) ** 2
        )
        rho_shell = np.sqrt(
            (ux - p.shell_center[0]) ** 2
            + (uy - p.shell_center[1]) ** 2
            + (uz - p.shell_center[2]) ** 2
        )
        rho1 = np.sqrt(
            ((ux - p.inner_center[0]) / p.inner_axes[0]) ** 2
            + ((uy - p.inner_center[1]) / p.inner_axes[1]) ** 2
            + ((uz - p.inner_center[2]) / p.inner_axes[2]) ** 2
        )
        rho2 = np.sqrt(
            ((ux - p.deep_center[0]) / p.deep_axes[0]) ** 2
            + ((uy - p.deep_center[1]) / p.deep_axes[1]) ** 2
            + ((uz - p.deep_center[2]) / p.deep_axes[2]) ** 2
        )
        texture = p.texture_amp * (
            np.sin(p.texture_freq * np.pi * ux)
            * np.sin(p.texture_freq * np.pi * uy)
            * np.sin(p.texture_freq * np.pi * uz)
        )
        data = p.base_value + p.base_ramp * (1.0 - rho0**2)
        data = np.where(rho2 < 1.0, p.deep_value, data)
        data = np.where(rho1 < 1.0, p.inner_value + texture, data)
        data = np.where(np.abs(rho_shell - p.shell_radius) <= p.shell_half_width,
                        p.shell_value, data)
        data = np.where(rho0 >= 1.0, 0.0, data)
    elif kind == "checker-shell":
        r = np.sqrt(ux**2 + uy**2 + uz**2)
        outer = 0.8
        shell_lo = outer - 0.05
        checker = (
            np.sin(p.checker_freq * np.pi * ux)
            * np.sin(p.checker_freq * np.pi * uy)
            * np.sin(p.checker_freq * np.pi * uz)
        )
        data = np.where(checker > 0.0, p.checker_hi, p.checker_lo)
        core = r <= p.core_radius
        data = np.where(core, p.core_value + p.core_ramp * (1.0 - (r / p.core_radius) ** 2),
                        data)
        data = np.where((r >= shell_lo) & (r < outer), 0.9, data)
        data = np.where(r >= outer, 0.0, data)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")

    data = np.clip(data, 0.0, 1.0)
    return Volume(data=data, spacing=np.full(3, float(spacing)), origin=np.zeros(3))


# ---------------------------------------------------------------------------
# Acquisition
# ---------------------------------------------------------------------------


@dataclass
class SliceStack:
    """Parallel thick slices from one orientation, with recorded motion."""

    orientation: str
    slices: np.ndarray  # (num_slices, n_a, n_b) along inplane_axes
    in_plane_spacing: float
    slice_thickness: float
    slice_gap: float
    through_axis: int
    inplane_axes: tuple  # two world axes, ascending
    world_min: np.ndarray  # (3,) low corner of the sampled box, world mm
    extent: np.ndarray  # (3,) box size, world mm
    pivot: np.ndarray  # (3,) motion pivot (volume center), world mm
    true_quats: np.ndarray  # (M, 4)
    true_trans: np.ndarray  # (M, 3) mm
    est_quats: np.ndarray  # (M, 4)
    est_trans: np.ndarray  # (M, 3) mm

    @property
    def num_slices(self):
        return self.slices.shape[0]

    def slice_center(self, m):
        return self.world_min[self.through_axis] + (m + 0.5) * self.slice_thickness

    def inplane_centers(self, axis):
        n = self.slices.shape[1] if axis == self.inplane_axes[0] else self.slices.shape[2]
        return self.world_min[axis] + (np.arange(n) + 0.5) * self.in_plane_spacing

    def slice_world_coords(self, m):
        """(n_a, n_b, 3) nominal world coordinates of slice m voxel centers."""
        a, b = self.inplane_axes
        ca = self.inplane_centers(a)
        cb = self.inplane_centers(b)
        ga, gb = np.meshgrid(ca, cb, indexing="ij")
        out = np.empty(ga.shape + (3,))
        out[..., a] = ga
        out[..., b] = gb
        out[..., self.through_axis] = self.slice_center(m)
        return out


def trilinear_sample(data, idx):
    """Sample ``data`` at fractional index positions, zero outside."""
    idx = np.asarray(idx, dtype=np.float64)
    flat = idx.reshape(-1, 3)
    base = np.floor(flat).astype(np.int64)
    frac = flat - base
    out = np.zeros(flat.shape[0])
    dims = np.array(data.shape)
    for da in (0, 1):
        for db in (0, 1):
            for dc in (0, 1):
                corner = base + np.array([da, db, dc])
                w = (
                    (frac[:, 0] if da else 1.0 - frac[:, 0])
                    * (frac[:, 1] if db else 1.0 - frac[:, 1])
                    * (frac[:, 2] if dc else 1.0 - frac[:, 2])
                )
                inside = np.all((corner >= 0) & (corner < dims), axis=1)
                ci = corner[inside]
                out[inside] += w[inside] * data[ci[:, 0], ci[:, 1], ci[:, 2]]
    return out.reshape(idx.shape[:-1])


def slab_kernel(thickness, through_spacing):
    """(offsets_mm, weights): Gaussian with FWHM = thickness, sampled at the
    source plane spacing and truncated at half the slice thickness."""
    n_half = int(np.floor(thickness / 2.0 / through_spacing + 1e-9))
    offsets = np.arange(-n_half, n_half + 1) * through_spacing
    keep = np.abs(offsets) <= thickness / 2.0 + 1e-9
    offsets = offsets[keep]
    sigma = thickness / FWHM_TO_SIGMA
    w = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return offsets, w / w.sum()


def _draw_rigid(rng, sigma_deg_mm, count):
    """Per-slice random rigid perturbations: angles N(0, sigma) in degrees,
    translations N(0, sigma) in mm."""
    quats = np.zeros((count, 4))
    trans = np.zeros((count, 3))
    for m in range(count):
        ang = np.deg2rad(rng.normal(0.0, sigma_deg_mm, 3)) if sigma_deg_mm > 0 else np.zeros(3)
        quats[m] = quat_from_euler(ang[0], ang[1], ang[2])
        trans[m] = rng.normal(0.0, sigma_deg_mm, 3) if sigma_deg_mm > 0 else np.zeros(3)
    return quats, trans


def acquire_stack(gt: Volume, orientation, in_plane_spacing, thickness,
                  motion_sigma=0.0, noise_sigma=0.0, seed=0, reg_error_sigma=0.0):
    """Simulate one thick-slice stack from a ground-truth volume.

    Each slice is a Gaussian-weighted slab integral through-plane
    (FWHM = thickness), resampled in-plane, perturbed by a small random
    rigid motion, with additive Gaussian noise.  ``motion_sigma`` is the
    std-dev of both the rotation angles (degrees) and translations (mm).
    """
    if orientation not in ORIENT_THROUGH:
        raise ValueError(f"unknown orientation {orientation!r}")
    through = ORIENT_THROUGH[orientation]
    if thickness < gt.spacing[through] - 1e-12:
        raise GeometryMismatch(
            f"thickness {thickness} below source spacing {gt.spacing[through]}"
        )
    lo, hi = gt.world_bounds()
    extent = hi - lo
    n_slices = int(np.floor(extent[through] / thickness + 1e-9))
    if n_slices < 1:
        raise GeometryMismatch("volume thinner than one slice")
    axes_inplane = tuple(a for a in range(3) if a != through)
    n_a = int(np.floor(extent[axes_inplane[0]] / in_plane_spacing + 1e-9))
    n_b = int(np.floor(extent[axes_inplane[1]] / in_plane_spacing + 1e-9))
    if n_a < 1 or n_b < 1:
        raise GeometryMismatch("in-plane spacing too coarse for the volume")

    rng = np.random.default_rng(seed)
    true_quats, true_trans = _draw_rigid(rng, motion_sigma, n_slices)
    err_quats, err_trans = _draw_rigid(rng, reg_error_sigma, n_slices)
    est_quats = np.array([quat_multiply(err_quats[m], true_quats[m])
                          for m in range(n_slices)])
    est_trans = true_trans + err_trans

    pivot = 0.5 * (lo + hi)
    offsets, weights = slab_kernel(thickness, gt.spacing[through])
    ca = lo[axes_inplane[0]] + (np.arange(n_a) + 0.5) * in_plane_spacing
    cb = lo[axes_inplane[1]] + (np.arange(n_b) + 0.5) * in_plane_spacing
    ga, gb = np.meshgrid(ca, cb, indexing="ij")

    slices = np.empty((n_slices, n_a, n_b))
    for m in range(n_slices):
        rot = quat_to_rotation(true_quats[m])
        zc = lo[through] + (m + 0.5) * thickness
        img = np.zeros((n_a, n_b))
        for off, w in zip(offsets, weights):
            pts = np.empty((n_a, n_b, 3))
            pts[..., axes_inplane[0]] = ga
            pts[..., axes_inplane[1]] = gb
            pts[..., through] = zc + off
            moved = (pts - pivot) @ rot.T + pivot + true_trans[m]
            idx = (moved - gt.origin) / gt.spacing
            img += w * trilinear_sample(gt.data, idx)
        if noise_sigma > 0:
            img = img + rng.normal(0.0, noise_sigma, img.shape)
        slices[m] = img

    return SliceStack(
        orientation=orientation,
        slices=slices,
        in_plane_spacing=float(in_plane_spacing),
        slice_thickness=float(thickness),
        slice_gap=0.0,
        through_axis=through,
        inplane_axes=axes_inplane,
        world_min=lo,
        extent=extent,
        pivot=pivot,
        true_quats=true_quats,
        true_trans=true_trans,
        est_quats=est_quats,
        est_trans=est_trans,
    )


# ---------------------------------------------------------------------------
# Devoxelization
# ---------------------------------------------------------------------------


@dataclass
class WorldMap:
    """Isotropic affine between world mm and normalized [-1, 1]^3 coords."""

    scale: float
    center: np.ndarray  # (3,) world mm

    def to_normalized(self, x):
        return (np.asarray(x, dtype=np.float64) - self.center) * self.scale

    def to_world(self, u):
        return np.asarray(u, dtype=np.float64) / self.scale + self.center


@dataclass
class SamplePoint:
    """One devoxelized observation."""

    coord: np.ndarray  # (3,) normalized
    intensity: float  # [0, 1]
    slice_id: int


@dataclass
class PointCloud:
    """Structure-of-arrays over devoxelized samples plus the coordinate and
    intensity normalization records needed for inference."""

    coords: np.ndarray  # (M, 3) normalized, pre-transform
    intensities: np.ndarray  # (M,) in [0, 1]
    slice_ids: np.ndarray  # (M,) global slice id
    world_map: WorldMap
    intensity_scale: float  # divide-by-max used to normalize intensities
    num_slices: int

    def __len__(self):
        return self.coords.shape[0]

    def __getitem__(self, i):
        return SamplePoint(
            coord=self.coords[i].copy(),
            intensity=float(self.intensities[i]),
            slice_id=int(self.slice_ids[i]),
        )


def stacks_world_map(stacks):
    """Isotropic map placing the union voxel-center bounding box in
    [-1, 1]^3 with the longest axis spanning [-0.98, 0.98]."""
    mins = np.full(3, np.inf)
    maxs = np.full(3, -np.inf)
    for st in stacks:
        for axis in range(3):
            if axis == st.through_axis:
                first = st.slice_center(0)
                last = st.slice_center(st.num_slices - 1)
            else:
                centers = st.inplane_centers(axis)
                first, last = centers[0], centers[-1]
            mins[axis] = min(mins[axis], first)
            maxs[axis] = max(maxs[axis], last)
    extent = maxs - mins
    scale = 2.0 * NORMALIZED_HALF_SPAN / max(extent.max(), 1e-12)
    return WorldMap(scale=scale, center=0.5 * (mins + maxs))


def devoxelize(stacks, foreground_threshold=0.02):
    """Convert stacks into the training point cloud.

    Intensities are normalized by the global maximum over all stacks and
    clamped to [0, 1]; a sample is emitted for every voxel whose
    normalized intensity exceeds the threshold.
    """
    if not stacks:
        raise ValueError("at least one stack required")
    world_map = stacks_world_map(stacks)
    max_val = max(float(st.slices.max()) for st in stacks)
    if max_val <= 0:
        raise EmptyForeground("no positive intensity in any stack")

    coords, intens, sids = [], [], []
    sid = 0
    for st in stacks:
        for m in range(st.num_slices):
            img = np.clip(st.slices[m] / max_val, 0.0, 1.0)
            mask = img > foreground_threshold
            if np.any(mask):
                world = st.slice_world_coords(m)[mask]
                coords.append(world_map.to_normalized(world))
                intens.append(img[mask])
                sids.append(np.full(int(mask.sum()), sid, dtype=np.int64))
            sid += 1
    if not coords:
        raise EmptyForeground(
            f"no voxel above foreground threshold {foreground_threshold}"
        )
    return PointCloud(
        coords=np.concatenate(coords),
        intensities=np.concatenate(intens),
        slice_ids=np.concatenate(sids),
        world_map=world_map,
        intensity_scale=max_val,
        num_slices=sid,
    )


def _world_rigid_to_normalized(quat, trans_mm, pivot, world_map):
    """Conjugate a world rigid map (rotation about ``pivot`` plus
    translation) by the world->normalized similarity."""
    rot = quat_to_rotation(quat)
    c = world_map.center
    s = world_map.scale
    # T_n(u) = R u + s * ((R - I)(c - pivot) + t)
    t_n = s * (rot @ (c - pivot) - (c - pivot) + trans_mm)
    return quat, t_n


def normalized_transforms(stacks, world_map, which="estimated"):
    """Per-slice rigid transforms in normalized space, global slice order."""
    quats, trans = [], []
    for st in stacks:
        q_arr = st.est_quats if which == "estimated" else st.true_quats
        t_arr = st.est_trans if which == "estimated" else st.true_trans
        for m in range(st.num_slices):
            q, t = _world_rigid_to_normalized(q_arr[m], t_arr[m], st.pivot, world_map)
            quats.append(q)
            trans.append(t)
    return TransformSet(quats=np.array(quats), translations=np.array(trans))


def build_slice_grids(stacks, world_map, intensity_scale):
    """Full native-resolution sample grid per slice (for the structural
    similarity loss), in the same normalized units as the point cloud."""
    grids = []
    sid = 0
    for st in stacks:
        for m in range(st.num_slices):
            world = st.slice_world_coords(m)
            coords = world_map.to_normalized(world.reshape(-1, 3))
            target = np.clip(st.slices[m] / intensity_scale, 0.0, 1.0)
            grids.append(SliceGrid(coords=coords, target=target, slice_id=sid))
            sid += 1
    return grids


# ---------------------------------------------------------------------------
# Baseline fusion
# ---------------------------------------------------------------------------


def fuse_trilinear(stacks, dims, spacing, origin, use_motions=True):
    """Trilinear fusion of stacks onto a target grid.

    Every stack voxel is splat with trilinear weights at its (optionally
    motion-corrected) world position; overlapping contributions average.
    This is the reference baseline the reconstruction must beat.
    """
    dims = tuple(int(d) for d in dims)
    spacing = np.asarray(spacing, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    acc = np.zeros(dims)
    wsum = np.zeros(dims)
    nd = np.array(dims)
    for st in stacks:
        for m in range(st.num_slices):
            world = st.slice_world_coords(m).reshape(-1, 3)
            vals = st.slices[m].reshape(-1)
            if use_motions:
                rot = quat_to_rotation(st.est_quats[m])
                world = (world - st.pivot) @ rot.T + st.pivot + st.est_trans[m]
            idx = (world - origin) / spacing
            base = np.floor(idx).astype(np.int64)
            frac = idx - base
            for da in (0, 1):
                for db in (0, 1):
                    for dc in (0, 1):
                        corner = base + np.array([da, db, dc])
                        w = (
                            (frac[:, 0] if da else 1.0 - frac[:, 0])
                            * (frac[:, 1] if db else 1.0 - frac[:, 1])
                            * (frac[:, 2] if dc else 1.0 - frac[:, 2])
                        )
                        inside = np.all((corner >= 0) & (corner < nd), axis=1)
                        ci = corner[inside]
                        np.add.at(acc, (ci[:, 0], ci[:, 1], ci[:, 2]), w[inside] * vals[inside])
                        np.add.at(wsum, (ci[:, 0], ci[:, 1], ci[:, 2]), w[inside])
    data = np.where(wsum > 1e-12, acc / np.maximum(wsum, 1e-12), 0.0)
    return Volume(data=data, spacing=spacing, origin=origin)
