"""Domain types for the Gaussian field and the quaternion/covariance math.

Quaternions are stored w-first, i.e. ``q = (w, x, y, z)``, unnormalized
while they are being optimized.  Every forward evaluation normalizes before
converting to a rotation matrix.  All arrays are float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DegenerateQuaternion, ScaleOverflow

QUAT_NORM_EPS = 1e-12
LOG_SCALE_LIMIT = 20.0
PARAMS_PER_PRIMITIVE = 11  # 3 position + 4 quaternion + 3 log-scale + 1 intensity


def sigmoid(x):
    """Logistic function; saturates to exactly 0 / 1 at float64 extremes."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-x))
    return out if out.ndim else float(out)


def logit(p):
    """Inverse of :func:`sigmoid` on (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def normalize_quat(q):
    """Return q / ||q||; raises DegenerateQuaternion for near-zero norm.

    Accepts a single (4,) quaternion or a (N, 4) batch.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm <= QUAT_NORM_EPS):
        raise DegenerateQuaternion(f"quaternion norm {norm.min():g} <= {QUAT_NORM_EPS:g}")
    return q / norm


def quat_to_rotation(q):
    """Rotation matrix of q / ||q||.

    Single (4,) input yields (3, 3); batched (N, 4) yields (N, 3, 3).
    """
    qn = normalize_quat(q)
    single = qn.ndim == 1
    qn = np.atleast_2d(qn)
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    rot = np.empty((qn.shape[0], 3, 3), dtype=np.float64)
    rot[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rot[:, 0, 1] = 2.0 * (x * y - w * z)
    rot[:, 0, 2] = 2.0 * (x * z + w * y)
    rot[:, 1, 0] = 2.0 * (x * y + w * z)
    rot[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rot[:, 1, 2] = 2.0 * (y * z - w * x)
    rot[:, 2, 0] = 2.0 * (x * z - w * y)
    rot[:, 2, 1] = 2.0 * (y * z + w * x)
    rot[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return rot[0] if single else rot


def quat_multiply(a, b):
    """Hamilton product a * b, both w-first."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def quat_from_euler(rx, ry, rz):
    """Quaternion of Rz(rz) @ Ry(ry) @ Rx(rx), angles in radians."""
    qx = quat_from_axis_angle([1.0, 0.0, 0.0], rx)
    qy = quat_from_axis_angle([0.0, 1.0, 0.0], ry)
    qz = quat_from_axis_angle([0.0, 0.0, 1.0], rz)
    return quat_multiply(qz, quat_multiply(qy, qx))


@dataclass
class Covariance:
    """Factored covariance of one primitive: rotation, scale, cached precision."""

    rotation: np.ndarray  # (3, 3) orthonormal
    scale_diag: np.ndarray  # (3,) positive, exp(log_scales)
    precision: np.ndarray  # (3, 3) symmetric positive definite

    @property
    def covariance(self):
        s2 = self.scale_diag**2
        return (self.rotation * s2[None, :]) @ self.rotation.T


def assemble_precision(q, s, clamp=False):
    """Build the factored covariance for quaternion q and log-scales s.

    precision = R diag(exp(-2s)) R^T, computed analytically rather than by
    numeric inversion.  With ``clamp=True`` the log-scales are clamped to
    |s| <= 20 instead of raising ScaleOverflow (the batched render path
    uses the clamped form).
    """
    s = np.asarray(s, dtype=np.float64)
    if clamp:
        s = np.clip(s, -LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)
    elif np.any(np.abs(s) > LOG_SCALE_LIMIT):
        raise ScaleOverflow(f"|log_scale| {np.abs(s).max():g} > {LOG_SCALE_LIMIT:g}")
    rot = quat_to_rotation(q)
    inv_var = np.exp(-2.0 * s)
    precision = (rot * inv_var[None, :]) @ rot.T
    return Covariance(rotation=rot, scale_diag=np.exp(s), precision=precision)


@dataclass
class RigidTransform:
    """Per-slice rigid map x -> R(q/||q||) x + t in normalized coordinates."""

    rotation_quat: np.ndarray  # (4,)
    translation: np.ndarray  # (3,)
    slice_id: int = -1

    @classmethod
    def identity(cls, slice_id=-1):
        return cls(
            rotation_quat=np.array([1.0, 0.0, 0.0, 0.0]),
            translation=np.zeros(3),
            slice_id=slice_id,
        )


def apply_rigid(t: RigidTransform, x):
    x = np.asarray(x, dtype=np.float64)
    return quat_to_rotation(t.rotation_quat) @ x + t.translation


def compose_rigid(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying b first, then a."""
    qa = normalize_quat(a.rotation_quat)
    qb = normalize_quat(b.rotation_quat)
    ra = quat_to_rotation(qa)
    return RigidTransform(
        rotation_quat=quat_multiply(qa, qb),
        translation=ra @ np.asarray(b.translation, dtype=np.float64) + a.translation,
        slice_id=a.slice_id,
    )


def invert_rigid(t: RigidTransform) -> RigidTransform:
    qn = normalize_quat(t.rotation_quat)
    qc = quat_conjugate(qn)
    return RigidTransform(
        rotation_quat=qc,
        translation=-(quat_to_rotation(qc) @ np.asarray(t.translation, dtype=np.float64)),
        slice_id=t.slice_id,
    )


@dataclass
class TransformSet:
    """Structure-of-arrays view over per-slice rigid transforms."""

    quats: np.ndarray  # (K, 4) unnormalized during optimization
    translations: np.ndarray  # (K, 3)

    @classmethod
    def identity(cls, count):
        quats = np.zeros((count, 4))
        quats[:, 0] = 1.0
        return cls(quats=quats, translations=np.zeros((count, 3)))

    @classmethod
    def from_list(cls, transforms):
        quats = np.stack([np.asarray(t.rotation_quat, dtype=np.float64) for t in transforms])
        trans = np.stack([np.asarray(t.translation, dtype=np.float64) for t in transforms])
        return cls(quats=quats, translations=trans)

    def to_list(self):
        return [
            RigidTransform(self.quats[k].copy(), self.translations[k].copy(), slice_id=k)
            for k in range(len(self))
        ]

    def rotations(self):
        return quat_to_rotation(self.quats)

    def copy(self):
        return TransformSet(self.quats.copy(), self.translations.copy())

    def __len__(self):
        return self.quats.shape[0]


@dataclass
class Volume:
    """Dense scalar volume with voxel spacing / origin metadata.

    ``origin`` is the world coordinate of the center of voxel (0, 0, 0);
    voxel (i, j, k) sits at origin + (i, j, k) * spacing.  Axes follow the
    RAS convention throughout.
    """

    data: np.ndarray  # (nx, ny, nz)
    spacing: np.ndarray = dc_field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    orientation: str = "RAS"

    def __post_init__(self):
        self.spacing = np.asarray(self.spacing, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)

    @property
    def dims(self):
        return tuple(self.data.shape)

    def voxel_centers_axis(self, axis):
        n = self.data.shape[axis]
        return self.origin[axis] + np.arange(n) * self.spacing[axis]

    def world_bounds(self):
        """(low, high) world corner coordinates of the voxel-covered box."""
        lo = self.origin - 0.5 * self.spacing
        hi = self.origin + (np.array(self.data.shape) - 0.5) * self.spacing
        return lo, hi


@dataclass
class GaussianField:
    """Structure-of-values for N Gaussian primitives on a cubic lattice.

    The four learnable arrays carry 3 + 4 + 3 + 1 = 11 parameters per
    primitive.  ``lattice_index`` maps each primitive to its lattice node;
    N always equals the product of ``lattice_dims``.
    """

    positions: np.ndarray  # (N, 3) in [-1, 1]
    quaternions: np.ndarray  # (N, 4) unnormalized
    log_scales: np.ndarray  # (N, 3)
    intensity_logits: np.ndarray  # (N,)
    lattice_dims: tuple  # (R, R, R)
    lattice_index: np.ndarray  # (N, 3) int

    @property
    def count(self):
        return self.positions.shape[0]

    @property
    def alphas(self):
        return sigmoid(self.intensity_logits)

    @property
    def params_per_primitive(self):
        return PARAMS_PER_PRIMITIVE

    def copy(self):
        return GaussianField(
            positions=self.positions.copy(),
            quaternions=self.quaternions.copy(),
            log_scales=self.log_scales.copy(),
            intensity_logits=self.intensity_logits.copy(),
            lattice_dims=tuple(self.lattice_dims),
            lattice_index=self.lattice_index.copy(),
        )

    def validate(self):
        n = self.count
        if n != int(np.prod(self.lattice_dims)):
            raise ValueError("primitive count does not match lattice dims")
        for arr, shape in (
            (self.positions, (n, 3)),
            (self.quaternions, (n, 4)),
            (self.log_scales, (n, 3)),
            (self.intensity_logits, (n,)),
            (self.lattice_index, (n, 3)),
        ):
            if arr.shape != shape:
                raise ValueError(f"bad array shape {arr.shape}, expected {shape}")
        return self


def lattice_node_positions(resolution):
    """Node centers of an R^3 lattice over [-1, 1]^3, C-ordered (i, j, k)."""
    r = int(resolution)
    axis = -1.0 + (np.arange(r) + 0.5) * (2.0 / r)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def lattice_node_index(resolution):
    r = int(resolution)
    ii, jj, kk = np.meshgrid(np.arange(r), np.arange(r), np.arange(r), indexing="ij")
    return np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1).astype(np.int64)


def uniform_lattice_field(resolution, intensity_logits=None):
    """Fresh field on a uniform R^3 lattice.

    Quaternions start at identity and log-scales are set so one standard
    deviation equals half the lattice spacing.  Intensity logits default
    to zero (alpha = 0.5) unless provided.
    """
    r = int(resolution)
    n = r**3
    positions = lattice_node_positions(r)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    log_scales = np.full((n, 3), np.log(1.0 / r))
    if intensity_logits is None:
        intensity_logits = np.zeros(n)
    else:
        intensity_logits = np.asarray(intensity_logits, dtype=np.float64).reshape(n).copy()
    return GaussianField(
        positions=positions,
        quaternions=quats,
        log_scales=log_scales,
        intensity_logits=intensity_logits,
        lattice_dims=(r, r, r),
        lattice_index=lattice_node_index(r),
    ).validate()
