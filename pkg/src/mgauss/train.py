"""Losses, per-group Adam, progressive resolution schedule, and the
training loop that ties rendering and the residual field together.

One optimizer step is a strict sequence: forward, backward with
accumulated gradients, single-writer parameter update, partition-grid
rebuild.  Nothing overlaps, so fixed-seed runs are bit-reproducible and a
checkpoint taken at any iteration resumes the exact trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .core import (
    GaussianField,
    TransformSet,
    lattice_node_index,
    lattice_node_positions,
    logit,
    normalize_quat,
    uniform_lattice_field,
)
from .errors import NonFiniteLoss, ShrinkNotAllowed
from .nrf import ResidualField, nrf_backward, nrf_forward_cached
from .render import (
    activated_parameters,
    render_backward,
    render_points,
    sample_volume,
    transform_grads_from_points,
)
from .spatial import build, cell_index
from .ssim import ssim_loss_grad

DEFAULT_SCHEDULE = ((0, 70), (500, 100), (1000, 130), (2000, 165), (3000, 200))


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the published configuration."""

    lr_position: float = 0.001
    lr_intensity: float = 0.05
    lr_scale: float = 0.005
    lr_rotation: float = 0.001
    lr_nrf: float = 0.0001
    lr_transform: float = 0.0001
    lambda_ssim: float = 0.5
    lambda_aniso: float = 0.1
    lambda_ratio: float = 1.5  # permissible scale anisotropy before penalty
    block_radius: int = 5
    resolution_schedule: tuple = DEFAULT_SCHEDULE
    nrf_activation_iter: int = 2000
    total_iters: int = 4000
    batch_points: int = 65536
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    use_ssim: bool = True
    use_nrf: bool = True
    use_aniso: bool = True
    use_progressive: bool = True

    def validate(self):
        for name in ("lr_position", "lr_intensity", "lr_scale", "lr_rotation",
                     "lr_nrf", "lr_transform"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        sched = tuple((int(i), int(r)) for i, r in self.resolution_schedule)
        if not sched or sched[0][0] != 0:
            raise ValueError("resolution_schedule must start at iteration 0")
        iters = [i for i, _ in sched]
        if any(b <= a for a, b in zip(iters, iters[1:])):
            raise ValueError("schedule iterations must be strictly increasing")
        res = [r for _, r in sched]
        if any(b < a for a, b in zip(res, res[1:])):
            raise ValueError("schedule resolutions must be non-decreasing")
        if self.batch_points < 1 or self.total_iters < 0:
            raise ValueError("batch_points >= 1 and total_iters >= 0 required")
        return self

    def resolution_at(self, iteration):
        res = self.resolution_schedule[0][1]
        for it, r in self.resolution_schedule:
            if iteration >= it:
                res = r
        return res

    @property
    def final_resolution(self):
        return max(r for _, r in self.resolution_schedule)

    def to_dict(self):
        d = self.__dict__.copy()
        d["resolution_schedule"] = [list(m) for m in self.resolution_schedule]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["resolution_schedule"] = tuple(tuple(m) for m in d["resolution_schedule"])
        return cls(**d).validate()


def smooth_l1(pred, target):
    """Huber loss: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise; mean over batch."""
    x = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    ax = np.abs(x)
    vals = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return float(np.mean(vals))


def smooth_l1_grad(pred, target):
    """d(mean huber)/dpred."""
    x = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    g = np.where(np.abs(x) < 1.0, x, np.sign(x))
    return g / x.size


def aniso_loss(field: GaussianField, lambda_ratio):
    """Mean hinge on the max/min activated-scale ratio per primitive."""
    return aniso_loss_grad(field, lambda_ratio)[0]


def aniso_loss_grad(field: GaussianField, lambda_ratio):
    """(loss, d loss / d log_scales).

    The ratio of activated scales exp(s_max) / exp(s_min) equals
    exp(s_max - s_min); ties pick the first axis (argmax/argmin order).
    """
    s = field.log_scales
    hi = np.argmax(s, axis=1)
    lo = np.argmin(s, axis=1)
    n = field.count
    rows = np.arange(n)
    ratio = np.exp(s[rows, hi] - s[rows, lo])
    excess = ratio - lambda_ratio
    active = excess > 0
    loss = float(np.sum(excess[active]) / n)
    grad = np.zeros_like(s)
    coeff = np.where(active, ratio / n, 0.0)
    np.add.at(grad, (rows, hi), coeff)
    np.add.at(grad, (rows, lo), -coeff)
    return loss, grad


def _to_lattice(values, lattice_index, dims):
    """Scatter per-primitive values into dense (R, R, R, ...) lattice order."""
    out = np.zeros(dims + values.shape[1:], dtype=np.float64)
    out[lattice_index[:, 0], lattice_index[:, 1], lattice_index[:, 2]] = values
    return out


def progressive_upsample(field: GaussianField, new_resolution):
    """Resample the lattice to ``new_resolution`` per axis.

    Intensity logits and log-scales are trilinearly interpolated over the
    old lattice (in lattice-index coordinates); quaternions use normalized
    linear interpolation with signs aligned to the nearest corner of each
    interpolation cell.  Positions are re-seeded on the new uniform
    lattice nodes.
    """
    old_r = int(field.lattice_dims[0])
    new_r = int(new_resolution)
    if new_r < old_r:
        raise ShrinkNotAllowed(f"cannot shrink lattice {old_r} -> {new_r}")
    dims = (old_r, old_r, old_r)
    lat_logits = _to_lattice(field.intensity_logits, field.lattice_index, dims)
    lat_scales = _to_lattice(field.log_scales, field.lattice_index, dims)
    lat_quats = _to_lattice(field.quaternions, field.lattice_index, dims)

    axis_new = np.arange(new_r)
    frac = (axis_new + 0.5) * (old_r / new_r) - 0.5
    frac = np.clip(frac, 0.0, old_r - 1.0)
    fx, fy, fz = np.meshgrid(frac, frac, frac, indexing="ij")
    f = np.stack([fx.ravel(), fy.ravel(), fz.ravel()], axis=1)
    if old_r > 1:
        base = np.minimum(np.floor(f).astype(np.int64), old_r - 2)
    else:
        base = np.zeros_like(f, dtype=np.int64)
    t = f - base

    n_new = new_r**3
    logits = np.zeros(n_new)
    scales = np.zeros((n_new, 3))
    quats = np.zeros((n_new, 4))
    # sign-alignment reference: the max-weight (nearest) corner
    ref_idx = np.minimum(base + (t >= 0.5), old_r - 1)
    ref = lat_quats[ref_idx[:, 0], ref_idx[:, 1], ref_idx[:, 2]]
    for da in (0, 1):
        for db in (0, 1):
            for dc in (0, 1):
                ia = np.minimum(base[:, 0] + da, old_r - 1)
                ib = np.minimum(base[:, 1] + db, old_r - 1)
                ic = np.minimum(base[:, 2] + dc, old_r - 1)
                w = (
                    (t[:, 0] if da else 1.0 - t[:, 0])
                    * (t[:, 1] if db else 1.0 - t[:, 1])
                    * (t[:, 2] if dc else 1.0 - t[:, 2])
                )
                logits += w * lat_logits[ia, ib, ic]
                scales += w[:, None] * lat_scales[ia, ib, ic]
                q = lat_quats[ia, ib, ic]
                sign = np.where(np.sum(q * ref, axis=1) < 0.0, -1.0, 1.0)
                quats += (w * sign)[:, None] * q
    quats = normalize_quat(quats)

    return GaussianField(
        positions=lattice_node_positions(new_r),
        quaternions=quats,
        log_scales=scales,
        intensity_logits=logits,
        lattice_dims=(new_r, new_r, new_r),
        lattice_index=lattice_node_index(new_r),
    ).validate()


def init_field(cloud, resolution, logit_eps=1e-4):
    """Field on a uniform lattice with intensities seeded from the samples.

    Each node's intensity logit is the logit of the mean observed sample
    intensity inside its cell (zero logit where the cell is empty).
    """
    r = int(resolution)
    cells = cell_index(cloud.coords, r)
    flat = (cells[:, 0] * r + cells[:, 1]) * r + cells[:, 2]
    sums = np.bincount(flat, weights=cloud.intensities, minlength=r**3)
    counts = np.bincount(flat, minlength=r**3)
    logits = np.zeros(r**3)
    occupied = counts > 0
    mean = np.clip(sums[occupied] / counts[occupied], logit_eps, 1.0 - logit_eps)
    logits[occupied] = logit(mean)
    return uniform_lattice_field(r, intensity_logits=logits)


class AdamState:
    """Named parameter groups with first/second moments and step counters."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.groups = {}

    def reset_group(self, name):
        self.groups.pop(name, None)

    def step(self, name, params, grads, lr):
        """Update each array in ``params`` in place from ``grads``."""
        g = self.groups.setdefault(name, {"t": 0, "m": {}, "v": {}})
        g["t"] += 1
        t = g["t"]
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for key, param in params.items():
            grad = grads[key]
            m = g["m"].get(key)
            v = g["v"].get(key)
            if m is None:
                m = np.zeros_like(param)
                v = np.zeros_like(param)
                g["m"][key] = m
                g["v"][key] = v
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self):
        out = {}
        for name, g in self.groups.items():
            out[name] = {
                "t": g["t"],
                "m": {k: a.copy() for k, a in g["m"].items()},
                "v": {k: a.copy() for k, a in g["v"].items()},
            }
        return out

    def load_state_dict(self, state):
        self.groups = {}
        for name, g in state.items():
            self.groups[name] = {
                "t": int(g["t"]),
                "m": {k: np.array(a, dtype=np.float64) for k, a in g["m"].items()},
                "v": {k: np.array(a, dtype=np.float64) for k, a in g["v"].items()},
            }


@dataclass
class SliceGrid:
    """Full native in-plane sample grid of one acquired slice."""

    coords: np.ndarray  # (H * W, 3), C-order matching target.ravel()
    target: np.ndarray  # (H, W) normalized intensities
    slice_id: int


@dataclass
class LossReport:
    iteration: int
    total: float
    data: float
    ssim: float
    aniso: float
    resolution: int
    nrf_active: bool

    def to_line(self):
        return (
            f"iter={self.iteration} total={self.total:.10g} l1={self.data:.10g} "
            f"ssim={self.ssim:.10g} aniso={self.aniso:.10g} "
            f"res={self.resolution} nrf={int(self.nrf_active)}"
        )


class Trainer:
    """Owns the field, residual network, transforms, and optimizer state."""

    def __init__(self, cloud, transforms: TransformSet, config: TrainConfig,
                 slice_grids=None):
        config.validate()
        if config.use_ssim and not slice_grids:
            raise ValueError("use_ssim requires slice sample grids")
        self.config = config
        self.cloud = cloud
        self.transforms = transforms.copy()
        self.slice_grids = list(slice_grids or [])
        root = np.random.SeedSequence(config.seed)
        batch_ss, nrf_ss = root.spawn(2)
        self.rng = np.random.default_rng(batch_ss)
        self.nrf = ResidualField.create(np.random.default_rng(nrf_ss)) if config.use_nrf else None
        start_res = (config.resolution_at(0) if config.use_progressive
                     else config.final_resolution)
        self.field = init_field(cloud, start_res)
        self.grid = build(self.field, start_res, config.block_radius)
        self.adam = AdamState(config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.iteration = 0
        self._perm = None
        self._cursor = 0
        self.reports = []

    # -- data batching ---------------------------------------------------

    def _next_batch(self):
        m = self.cloud.coords.shape[0]
        b = min(self.config.batch_points, m)
        if b == m:
            return np.arange(m)
        picked = []
        need = b
        while need > 0:
            if self._perm is None or self._cursor >= m:
                self._perm = self.rng.permutation(m)
                self._cursor = 0
            take = min(need, m - self._cursor)
            picked.append(self._perm[self._cursor : self._cursor + take])
            self._cursor += take
            need -= take
        return np.concatenate(picked) if len(picked) > 1 else picked[0]

    # -- schedule ---------------------------------------------------------

    @property
    def nrf_active(self):
        return (self.config.use_nrf
                and self.iteration >= self.config.nrf_activation_iter)

    def _apply_milestones(self):
        if not self.config.use_progressive:
            return
        for it, res in self.config.resolution_schedule:
            if it == self.iteration and res > self.field.lattice_dims[0]:
                self.field = progressive_upsample(self.field, res)
                self.grid = build(self.field, res, self.config.block_radius)
                for group in ("positions", "quaternions", "log_scales",
                              "intensity_logits"):
                    self.adam.reset_group(group)

    # -- one optimizer step ------------------------------------------------

    def step(self):
        cfg = self.config
        self._apply_milestones()

        idx = self._next_batch()
        batch = self.cloud.coords[idx]
        # cell-sorted batches keep the kernels' primitive reads local
        g = self.grid.grid_resolution
        cells = cell_index(batch, g)
        order = np.argsort((cells[:, 0] * g + cells[:, 1]) * g + cells[:, 2],
                           kind="stable")
        idx = idx[order]
        batch = batch[order]
        batch_sids = self.cloud.slice_ids[idx]
        targets = self.cloud.intensities[idx]

        prepared = activated_parameters(self.field)
        fwd = render_points(self.field, self.grid, self.transforms,
                            _Batch(batch, batch_sids), prepared=prepared)
        nb = batch.shape[0]
        coords_all, sids_all, points_all = batch, batch_sids, fwd.points
        sg = None
        if cfg.use_ssim:
            sg = self.slice_grids[int(self.rng.integers(len(self.slice_grids)))]
            sl_sids = np.full(sg.coords.shape[0], sg.slice_id, dtype=np.int64)
            sl_fwd = render_points(self.field, self.grid, self.transforms,
                                   _Batch(sg.coords, sl_sids), prepared=prepared)
            coords_all = np.concatenate([batch, sg.coords])
            sids_all = np.concatenate([batch_sids, sl_sids])
            points_all = np.concatenate([fwd.points, sl_fwd.points])

        nrf_cache = None
        residual_all = None
        if self.nrf_active:
            residual_all, nrf_cache = nrf_forward_cached(self.nrf, points_all)

        pred = fwd.intensities
        if residual_all is not None:
            pred = pred + residual_all[:nb]
        data_loss = smooth_l1(pred, targets)
        upstream_all = smooth_l1_grad(pred, targets)

        ssim_val = 0.0
        if cfg.use_ssim:
            sl_pred = sl_fwd.intensities
            if residual_all is not None:
                sl_pred = sl_pred + residual_all[nb:]
            ssim_val, dslice = ssim_loss_grad(sl_pred.reshape(sg.target.shape),
                                              sg.target)
            upstream_all = np.concatenate(
                [upstream_all, cfg.lambda_ssim * dslice.ravel()]
            )

        aniso_val = 0.0
        d_scales_aniso = None
        if cfg.use_aniso:
            aniso_val, d_scales_aniso = aniso_loss_grad(self.field, cfg.lambda_ratio)

        total = data_loss + cfg.lambda_ssim * ssim_val + cfg.lambda_aniso * aniso_val
        if not np.isfinite(total):
            raise NonFiniteLoss(f"non-finite loss at iteration {self.iteration}")

        grads = render_backward(self.field, self.grid, self.transforms,
                                _Batch(coords_all, sids_all), upstream_all,
                                prepared=prepared)
        d_transform = grads.d_transform_params
        if self.nrf_active:
            ng = nrf_backward(self.nrf, points_all, upstream_all, cache=nrf_cache)
            d_transform = d_transform + transform_grads_from_points(
                self.transforms, coords_all, sids_all, ng.d_points
            )

        d_log_scales = grads.d_log_scales
        if d_scales_aniso is not None:
            d_log_scales = d_log_scales + cfg.lambda_aniso * d_scales_aniso

        self.adam.step("positions", {"p": self.field.positions},
                       {"p": grads.d_positions}, cfg.lr_position)
        self.adam.step("quaternions", {"q": self.field.quaternions},
                       {"q": grads.d_quaternions}, cfg.lr_rotation)
        self.adam.step("log_scales", {"s": self.field.log_scales},
                       {"s": d_log_scales}, cfg.lr_scale)
        self.adam.step("intensity_logits", {"a": self.field.intensity_logits},
                       {"a": grads.d_intensity_logits}, cfg.lr_intensity)
        self.adam.step(
            "transforms",
            {"q": self.transforms.quats, "t": self.transforms.translations},
            {"q": d_transform[:, :4], "t": d_transform[:, 4:]},
            cfg.lr_transform,
        )
        if self.nrf_active:
            self.adam.step("nrf", self.nrf.parameter_arrays(),
                           self._nrf_grad_dict(ng), cfg.lr_nrf)

        self.grid = build(self.field, self.grid.grid_resolution, cfg.block_radius)
        report = LossReport(
            iteration=self.iteration,
            total=total,
            data=data_loss,
            ssim=ssim_val,
            aniso=aniso_val,
            resolution=int(self.field.lattice_dims[0]),
            nrf_active=self.nrf_active,
        )
        self.iteration += 1
        self.reports.append(report)
        return report

    @staticmethod
    def _nrf_grad_dict(ng):
        out = {}
        for li, (dw, db) in enumerate(zip(ng.d_weights, ng.d_biases)):
            out[f"w{li}"] = dw
            out[f"b{li}"] = db
        return out

    def run(self, iterations=None):
        target = self.config.total_iters if iterations is None else self.iteration + iterations
        while self.iteration < target:
            self.step()
        return self.reports

    # -- inference ---------------------------------------------------------

    def render_volume(self, dims, bounds, include_nrf=True):
        residual = self.nrf if (include_nrf and self.nrf_active) else None
        return sample_volume(self.field, self.grid, residual, dims, bounds,
                             radius=self.config.block_radius)

    # -- checkpoint state ----------------------------------------------------

    def state_dict(self):
        state = {
            "config": self.config.to_dict(),
            "iteration": self.iteration,
            "field": {
                "positions": self.field.positions,
                "quaternions": self.field.quaternions,
                "log_scales": self.field.log_scales,
                "intensity_logits": self.field.intensity_logits,
                "lattice_dims": list(self.field.lattice_dims),
                "lattice_index": self.field.lattice_index,
            },
            "transforms": {
                "quats": self.transforms.quats,
                "translations": self.transforms.translations,
            },
            "adam": self.adam.state_dict(),
            "rng_state": self.rng.bit_generator.state,
            "perm": self._perm,
            "cursor": self._cursor,
        }
        if self.nrf is not None:
            state["nrf"] = {
                "frequency_bands": self.nrf.frequency_bands,
                "layer_widths": list(self.nrf.layer_widths),
                "weights": [w for w in self.nrf.weights],
                "biases": [b for b in self.nrf.biases],
            }
        return state

    def load_state_dict(self, state):
        cfg = TrainConfig.from_dict(state["config"])
        self.config = cfg
        f = state["field"]
        dims = tuple(int(d) for d in f["lattice_dims"])
        self.field = GaussianField(
            positions=np.array(f["positions"], dtype=np.float64),
            quaternions=np.array(f["quaternions"], dtype=np.float64),
            log_scales=np.array(f["log_scales"], dtype=np.float64),
            intensity_logits=np.array(f["intensity_logits"], dtype=np.float64),
            lattice_dims=dims,
            lattice_index=np.array(f["lattice_index"], dtype=np.int64),
        ).validate()
        self.grid = build(self.field, dims[0], cfg.block_radius)
        t = state["transforms"]
        self.transforms = TransformSet(
            quats=np.array(t["quats"], dtype=np.float64),
            translations=np.array(t["translations"], dtype=np.float64),
        )
        if "nrf" in state and cfg.use_nrf:
            n = state["nrf"]
            self.nrf = ResidualField(
                frequency_bands=int(n["frequency_bands"]),
                layer_widths=tuple(int(w) for w in n["layer_widths"]),
                weights=[np.array(w, dtype=np.float64) for w in n["weights"]],
                biases=[np.array(b, dtype=np.float64) for b in n["biases"]],
            )
        self.adam = AdamState(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.adam.load_state_dict(state["adam"])
        self.rng.bit_generator.state = state["rng_state"]
        self.iteration = int(state["iteration"])
        perm = state.get("perm")
        self._perm = None if perm is None else np.array(perm, dtype=np.int64)
        self._cursor = int(state["cursor"])


@dataclass
class _Batch:
    coords: np.ndarray
    slice_ids: np.ndarray
