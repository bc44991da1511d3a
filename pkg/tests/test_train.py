"""Losses, Adam, progressive resampling, and the training loop contracts."""

import numpy as np
import pytest

from mgauss.core import TransformSet, normalize_quat, uniform_lattice_field
from mgauss.errors import ShrinkNotAllowed
from mgauss.simdata import PointCloud, WorldMap
from mgauss.train import (
    AdamState,
    SliceGrid,
    TrainConfig,
    Trainer,
    aniso_loss,
    aniso_loss_grad,
    init_field,
    progressive_upsample,
    smooth_l1,
    smooth_l1_grad,
)

from conftest import central_difference, random_field


class TestSmoothL1:
    def test_unit_values(self):
        assert smooth_l1(0.0, 0.0) == 0.0
        assert smooth_l1(0.5, 0.0) == 0.125
        assert smooth_l1(2.0, 0.0) == 1.5

    def test_batch_mean(self, rng):
        pred = rng.normal(size=100)
        target = rng.normal(size=100)
        x = pred - target
        want = np.mean(np.where(np.abs(x) < 1, 0.5 * x * x, np.abs(x) - 0.5))
        np.testing.assert_allclose(smooth_l1(pred, target), want, atol=1e-15)

    def test_gradient(self, rng):
        pred = rng.normal(size=20) * 2.0
        target = rng.normal(size=20)
        fd = central_difference(lambda a: smooth_l1(pred, target), pred, step=1e-6)
        np.testing.assert_allclose(smooth_l1_grad(pred, target), fd,
                                   rtol=1e-6, atol=1e-10)


class TestAnisoLoss:
    def test_isotropic_is_zero(self, rng):
        f = uniform_lattice_field(3)
        assert aniso_loss(f, 1.5) == 0.0

    def test_elongated_example(self):
        """Scales (3, 1, 1) exceed ratio 1.5 by exactly 1.5."""
        f = uniform_lattice_field(1)
        f.log_scales[0] = np.log([3.0, 1.0, 1.0])
        np.testing.assert_allclose(aniso_loss(f, 1.5), 1.5, atol=1e-12)

    def test_matches_scalar_recomputation(self, rng):
        f = random_field(rng, side=4)
        lam = 1.5
        want = 0.0
        for i in range(f.count):
            e = np.exp(f.log_scales[i])
            want += max(0.0, e.max() / e.min() - lam)
        want /= f.count
        np.testing.assert_allclose(aniso_loss(f, lam), want, atol=1e-12)

    def test_gradient(self, rng):
        f = random_field(rng, side=2)
        _, grad = aniso_loss_grad(f, 1.2)
        fd = central_difference(lambda a: aniso_loss(f, 1.2), f.log_scales,
                                step=1e-7)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-10)


class TestAdam:
    def test_zero_beta_closed_form(self, rng):
        """With both betas zero one step is pred - lr * g / (|g| + eps)."""
        adam = AdamState(beta1=0.0, beta2=0.0, eps=1e-8)
        p = rng.normal(size=50)
        g = rng.normal(size=50)
        p0 = p.copy()
        adam.step("g", {"p": p}, {"p": g}, lr=0.1)
        want = p0 - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p, want, atol=1e-15)

    def test_moments_accumulate(self, rng):
        adam = AdamState(beta1=0.9, beta2=0.999, eps=1e-8)
        p = np.zeros(4)
        g = np.ones(4)
        for _ in range(3):
            adam.step("g", {"p": p}, {"p": g}, lr=0.01)
        state = adam.state_dict()
        assert state["g"]["t"] == 3
        want_m = 1.0 - 0.9**3  # geometric accumulation of unit gradients
        np.testing.assert_allclose(state["g"]["m"]["p"], want_m, atol=1e-12)

    def test_zero_learning_rate_leaves_parameters_unchanged(self, rng):
        adam = AdamState()
        p = rng.normal(size=20)
        before = p.copy()
        adam.step("g", {"p": p}, {"p": rng.normal(size=20)}, lr=0.0)
        np.testing.assert_array_equal(p, before)

    def test_reset_group(self, rng):
        adam = AdamState()
        p = rng.normal(size=3)
        adam.step("a", {"p": p}, {"p": np.ones(3)}, lr=0.1)
        adam.reset_group("a")
        assert "a" not in adam.groups

    def test_state_roundtrip(self, rng):
        adam = AdamState()
        p = rng.normal(size=6)
        adam.step("a", {"p": p}, {"p": rng.normal(size=6)}, lr=0.1)
        other = AdamState()
        other.load_state_dict(adam.state_dict())
        p1, p2 = p.copy(), p.copy()
        g = rng.normal(size=6)
        adam.step("a", {"p": p1}, {"p": g}, lr=0.1)
        other.step("a", {"p": p2}, {"p": g}, lr=0.1)
        np.testing.assert_array_equal(p1, p2)


class TestProgressiveUpsample:
    def test_shrink_not_allowed(self):
        f = uniform_lattice_field(4)
        with pytest.raises(ShrinkNotAllowed):
            progressive_upsample(f, 3)

    def test_identity_resample(self, rng):
        f = uniform_lattice_field(4)
        f.intensity_logits[:] = rng.normal(size=f.count)
        f.log_scales[:] = rng.normal(0, 0.3, (f.count, 3))
        f.quaternions[:] = rng.normal(size=(f.count, 4)) + np.array([1.5, 0, 0, 0])
        f.positions += rng.normal(0, 0.01, f.positions.shape)  # drifted
        out = progressive_upsample(f, 4)
        np.testing.assert_allclose(out.intensity_logits, f.intensity_logits, atol=1e-12)
        np.testing.assert_allclose(out.log_scales, f.log_scales, atol=1e-12)
        # quaternions equal up to normalization
        np.testing.assert_allclose(out.quaternions, normalize_quat(f.quaternions),
                                   atol=1e-12)
        # positions snapped back to lattice nodes
        np.testing.assert_allclose(out.positions, uniform_lattice_field(4).positions)

    def test_constant_field_stays_constant(self, rng):
        f = uniform_lattice_field(3)
        f.intensity_logits[:] = 0.7
        f.log_scales[:] = [-1.0, -1.2, -0.8]
        q = rng.normal(size=4) + np.array([1.0, 0, 0, 0])
        f.quaternions[:] = q
        out = progressive_upsample(f, 7)
        np.testing.assert_allclose(out.intensity_logits, 0.7, atol=1e-12)
        np.testing.assert_allclose(out.log_scales,
                                   np.broadcast_to([-1.0, -1.2, -0.8], (343, 3)),
                                   atol=1e-12)
        np.testing.assert_allclose(out.quaternions,
                                   np.broadcast_to(normalize_quat(q), (343, 4)),
                                   atol=1e-12)

    def test_linear_ramp_reproduced(self):
        """A logit ramp along x interpolates exactly at the new nodes."""
        f = uniform_lattice_field(4)
        # value = a + b * x at node centers
        a, b = 0.3, 1.7
        f.intensity_logits[:] = a + b * f.positions[:, 0]
        out = progressive_upsample(f, 8)
        want = a + b * np.clip(out.positions[:, 0], f.positions[:, 0].min(),
                               f.positions[:, 0].max())
        np.testing.assert_allclose(out.intensity_logits, want, atol=1e-10)

    def test_nlerp_of_equal_quats_is_identity(self, rng):
        q = rng.normal(size=4) * 3.0
        f = uniform_lattice_field(2)
        f.quaternions[:] = q
        out = progressive_upsample(f, 5)
        np.testing.assert_allclose(
            out.quaternions, np.broadcast_to(normalize_quat(q), (125, 4)), atol=1e-12
        )

    def test_sign_alignment(self):
        """Mixed-sign equivalents of one rotation must not cancel."""
        f = uniform_lattice_field(2)
        q = np.array([0.5, 0.5, 0.5, 0.5])
        f.quaternions[:] = q
        f.quaternions[::2] = -q
        out = progressive_upsample(f, 4)
        dots = out.quaternions @ q
        np.testing.assert_allclose(np.abs(dots), 1.0, atol=1e-12)


def toy_cloud(rng, n=4000):
    coords = rng.uniform(-0.9, 0.9, (n, 3))
    # smooth blob intensity field
    inten = np.exp(-np.sum(coords**2, axis=1) / 0.3) * 0.8
    return PointCloud(
        coords=coords,
        intensities=inten,
        slice_ids=np.zeros(n, dtype=np.int64),
        world_map=WorldMap(scale=1.0, center=np.zeros(3)),
        intensity_scale=1.0,
        num_slices=1,
    )


def toy_slice_grid(rng):
    n = 16
    axis = np.linspace(-0.9, 0.9, n)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    coords = np.stack([gx.ravel(), gy.ravel(), np.zeros(n * n)], axis=1)
    inten = np.exp(-(gx**2 + gy**2) / 0.3) * 0.8
    return SliceGrid(coords=coords, target=inten, slice_id=0)


def toy_config(**kw):
    base = dict(
        resolution_schedule=((0, 6), (60, 8)),
        total_iters=80,
        nrf_activation_iter=40,
        batch_points=1024,
        seed=3,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestInitField:
    def test_intensity_seeding(self, rng):
        cloud = toy_cloud(rng)
        f = init_field(cloud, 8)
        assert f.count == 512
        # occupied cells carry the logit of the local mean, empties zero
        from mgauss.spatial import cell_index

        cells = cell_index(cloud.coords, 8)
        flat = (cells[:, 0] * 8 + cells[:, 1]) * 8 + cells[:, 2]
        empty = np.setdiff1d(np.arange(512), flat)
        np.testing.assert_array_equal(f.intensity_logits[empty], 0.0)
        one_cell = flat[0]
        mask = flat == one_cell
        mean = np.clip(cloud.intensities[mask].mean(), 1e-4, 1 - 1e-4)
        want = np.log(mean / (1 - mean))
        np.testing.assert_allclose(f.intensity_logits[one_cell], want, atol=1e-12)


class TestTrainerContracts:
    def test_loss_decomposition(self, rng):
        cloud = toy_cloud(rng)
        tr = Trainer(cloud, TransformSet.identity(1), toy_config(),
                     slice_grids=[toy_slice_grid(rng)])
        rep = tr.step()
        want = rep.data + 0.5 * rep.ssim + 0.1 * rep.aniso
        np.testing.assert_allclose(rep.total, want, atol=1e-12)

    def test_nrf_untouched_before_activation(self, rng):
        cloud = toy_cloud(rng)
        tr = Trainer(cloud, TransformSet.identity(1), toy_config(),
                     slice_grids=[toy_slice_grid(rng)])
        init_weights = [w.copy() for w in tr.nrf.weights]
        init_biases = [b.copy() for b in tr.nrf.biases]
        for _ in range(tr.config.nrf_activation_iter):
            tr.step()
        for w0, w in zip(init_weights, tr.nrf.weights):
            np.testing.assert_array_equal(w0, w)
        for b0, b in zip(init_biases, tr.nrf.biases):
            np.testing.assert_array_equal(b0, b)
        tr.step()  # first active iteration touches the network
        assert any(np.any(b != b0) for b0, b in zip(init_biases, tr.nrf.biases))

    def test_schedule_conformance(self, rng):
        cloud = toy_cloud(rng)
        cfg = toy_config()
        tr = Trainer(cloud, TransformSet.identity(1), cfg,
                     slice_grids=[toy_slice_grid(rng)])
        for _ in range(cfg.total_iters):
            rep = tr.step()
            assert rep.resolution == cfg.resolution_at(rep.iteration)

    def test_fixed_resolution_when_progressive_off(self, rng):
        cloud = toy_cloud(rng)
        cfg = toy_config(use_progressive=False)
        tr = Trainer(cloud, TransformSet.identity(1), cfg,
                     slice_grids=[toy_slice_grid(rng)])
        assert tr.field.lattice_dims[0] == cfg.final_resolution
        tr.step()
        assert tr.field.lattice_dims[0] == cfg.final_resolution

    def test_convergence_smoke(self, rng):
        """Loss after a couple hundred steps beats the first step."""
        cloud = toy_cloud(rng)
        cfg = toy_config(total_iters=200, resolution_schedule=((0, 6),),
                         nrf_activation_iter=100, use_ssim=False)
        tr = Trainer(cloud, TransformSet.identity(1), cfg)
        first = tr.step().data
        for _ in range(199):
            last = tr.step().data
        assert last < first

    def test_quaternions_stay_raw(self, rng):
        """The step must not renormalize stored quaternions."""
        cloud = toy_cloud(rng)
        tr = Trainer(cloud, TransformSet.identity(1), toy_config(),
                     slice_grids=[toy_slice_grid(rng)])
        tr.field.quaternions *= 3.0
        before = tr.field.quaternions.copy()
        tr.step()
        after = tr.field.quaternions
        assert not np.allclose(np.linalg.norm(after, axis=1), 1.0)
        assert np.max(np.abs(after - before)) < 0.1  # moved by Adam, not rescaled

    def test_validation_errors(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_position=0.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(resolution_schedule=((0, 16), (10, 8))).validate()
        with pytest.raises(ValueError):
            TrainConfig(resolution_schedule=((5, 16),)).validate()
        with pytest.raises(ValueError):
            TrainConfig(resolution_schedule=((0, 16), (0, 24))).validate()
