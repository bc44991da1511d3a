"""Phantoms, acquisition simulation, devoxelization, baseline fusion."""

import numpy as np
import pytest

from mgauss.core import apply_rigid, quat_to_rotation
from mgauss.errors import EmptyForeground, GeometryMismatch
from mgauss.simdata import (
    acquire_stack,
    build_slice_grids,
    devoxelize,
    fuse_trilinear,
    make_phantom,
    normalized_transforms,
    phantom_params,
    slab_kernel,
    stacks_world_map,
    trilinear_sample,
)


def scalar_phantom_value(p, u):
    """Independent per-voxel re-implementation of the nested-ellipsoids
    formula."""
    ux, uy, uz = u
    rho0 = np.sqrt(
        ((ux - p.outer_center[0]) / p.outer_axes[0]) ** 2
        + ((uy - p.outer_center[1]) / p.outer_axes[1]) ** 2
        + ((uz - p.outer_center[2]) / p.outer_axes[2]) ** 2
    )
    if rho0 >= 1.0:
        return 0.0
    rho_shell = np.sqrt(
        (ux - p.shell_center[0]) ** 2
        + (uy - p.shell_center[1]) ** 2
        + (uz - p.shell_center[2]) ** 2
    )
    if abs(rho_shell - p.shell_radius) <= p.shell_half_width:
        return min(max(p.shell_value, 0.0), 1.0)
    rho1 = np.sqrt(
        ((ux - p.inner_center[0]) / p.inner_axes[0]) ** 2
        + ((uy - p.inner_center[1]) / p.inner_axes[1]) ** 2
        + ((uz - p.inner_center[2]) / p.inner_axes[2]) ** 2
    )
    if rho1 < 1.0:
        tex = p.texture_amp * (
            np.sin(p.texture_freq * np.pi * ux)
            * np.sin(p.texture_freq * np.pi * uy)
            * np.sin(p.texture_freq * np.pi * uz)
        )
        return min(max(p.inner_value + tex, 0.0), 1.0)
    rho2 = np.sqrt(
        ((ux - p.deep_center[0]) / p.deep_axes[0]) ** 2
        + ((uy - p.deep_center[1]) / p.deep_axes[1]) ** 2
        + ((uz - p.deep_center[2]) / p.deep_axes[2]) ** 2
    )
    if rho2 < 1.0:
        return min(max(p.deep_value, 0.0), 1.0)
    return min(max(p.base_value + p.base_ramp * (1.0 - rho0**2), 0.0), 1.0)


class TestPhantom:
    def test_deterministic(self):
        a = make_phantom("nested-ellipsoids", (24, 24, 24), seed=11)
        b = make_phantom("nested-ellipsoids", (24, 24, 24), seed=11)
        np.testing.assert_array_equal(a.data, b.data)

    def test_background_exactly_zero(self):
        vol = make_phantom("nested-ellipsoids", (64, 64, 64), seed=3)
        assert vol.data[0, 0, 0] == 0.0
        assert vol.data[-1, -1, -1] == 0.0
        corner = vol.data[:4, :4, :4]
        np.testing.assert_array_equal(corner, 0.0)

    def test_matches_scalar_reimplementation(self):
        dims = (20, 18, 22)
        vol = make_phantom("nested-ellipsoids", dims, seed=5)
        p = phantom_params("nested-ellipsoids", 5)
        axes = [(-1.0 + (np.arange(n) + 0.5) * 2.0 / n) for n in dims]
        for i in range(dims[0]):
            for j in range(dims[1]):
                for k in range(dims[2]):
                    u = (axes[0][i], axes[1][j], axes[2][k])
                    assert vol.data[i, j, k] == pytest.approx(
                        scalar_phantom_value(p, u), abs=1e-14
                    )

    def test_value_range_and_structure(self):
        vol = make_phantom("nested-ellipsoids", (48, 48, 48), seed=0)
        assert vol.data.min() >= 0.0 and vol.data.max() <= 1.0
        assert vol.data.max() > 0.9  # thin shell present
        vol2 = make_phantom("checker-shell", (48, 48, 48), seed=0)
        assert vol2.data.min() >= 0.0 and vol2.data.max() <= 1.0
        assert vol2.data[0, 0, 0] == 0.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_phantom("cube", (16, 16, 16))

    def test_minimum_dims(self):
        with pytest.raises(ValueError):
            make_phantom("nested-ellipsoids", (8, 32, 32))


class TestSlabKernel:
    def test_degenerate_single_tap(self):
        off, w = slab_kernel(1.0, 1.0)
        np.testing.assert_array_equal(off, [0.0])
        np.testing.assert_array_equal(w, [1.0])

    def test_truncated_at_half_thickness(self):
        off, w = slab_kernel(4.0, 1.0)
        np.testing.assert_array_equal(off, [-2.0, -1.0, 0.0, 1.0, 2.0])
        np.testing.assert_allclose(w.sum(), 1.0, atol=1e-15)
        sigma = 4.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))
        raw = np.exp(-(off**2) / (2 * sigma**2))
        np.testing.assert_allclose(w, raw / raw.sum(), atol=1e-15)


class TestAcquire:
    def test_degenerate_equals_resampling(self):
        """thickness = source spacing, unit in-plane ratio, no motion or
        noise: slices are exact axis-aligned planes of the volume."""
        gt = make_phantom("nested-ellipsoids", (24, 24, 24), seed=1)
        st = acquire_stack(gt, "axial", 1.0, 1.0, 0.0, 0.0, seed=0)
        assert st.num_slices == 24
        for m in range(24):
            np.testing.assert_allclose(st.slices[m], gt.data[:, :, m], atol=1e-10)

    def test_constant_volume_gives_constant_slices(self):
        gt = make_phantom("nested-ellipsoids", (16, 16, 16), seed=0)
        gt.data[:] = 0.37
        st = acquire_stack(gt, "coronal", 1.0, 4.0, 0.0, 0.0, seed=0)
        for m in range(st.num_slices):
            assert np.ptp(st.slices[m]) < 1e-12  # constant in-plane
        # slices whose slab lies fully inside the volume hit the constant
        np.testing.assert_allclose(st.slices[1:-1], 0.37, atol=1e-12)

    def test_slab_profile_matches_kernel(self):
        """A single bright plane responds with the discrete kernel weights
        pushed through the same through-plane interpolation."""
        gt = make_phantom("nested-ellipsoids", (16, 16, 16), seed=0)
        gt.data[:] = 0.0
        plane = 7
        gt.data[:, :, plane] = 1.0
        thickness = 3.0
        st = acquire_stack(gt, "axial", 1.0, thickness, 0.0, 0.0, seed=0)
        offsets, weights = slab_kernel(thickness, 1.0)
        for m in range(st.num_slices):
            zc = st.slice_center(m)
            want = 0.0
            for off, w in zip(offsets, weights):
                # linear interpolation of the delta plane at tap position
                z = zc + off
                fz = (z - gt.origin[2]) / gt.spacing[2]
                lo = int(np.floor(fz))
                frac = fz - lo
                val = 0.0
                if lo == plane:
                    val += 1.0 - frac
                if lo + 1 == plane:
                    val += frac
                want += w * val
            np.testing.assert_allclose(st.slices[m][4, 4], want, atol=1e-8)

    def test_energy_sanity(self):
        """Mean slice intensity of a noiseless, motionless acquisition
        equals the slab-weighted mean of the ground truth."""
        gt = make_phantom("nested-ellipsoids", (32, 32, 32), seed=2)
        st = acquire_stack(gt, "axial", 1.0, 4.0, 0.0, 0.0, seed=0)
        offsets, weights = slab_kernel(4.0, 1.0)
        for m in range(st.num_slices):
            zc = st.slice_center(m)
            want = 0.0
            for off, w in zip(offsets, weights):
                fz = (zc + off - gt.origin[2]) / gt.spacing[2]
                lo = int(np.floor(fz))
                frac = fz - lo
                plane = 0.0
                if 0 <= lo < 32:
                    plane += (1 - frac) * gt.data[:, :, lo].mean()
                if 0 <= lo + 1 < 32:
                    plane += frac * gt.data[:, :, lo + 1].mean()
                want += w * plane
            np.testing.assert_allclose(st.slices[m].mean(), want, atol=1e-6)

    def test_geometry_mismatch(self):
        gt = make_phantom("nested-ellipsoids", (16, 16, 16), seed=0)
        with pytest.raises(GeometryMismatch):
            acquire_stack(gt, "axial", 1.0, 0.5, 0.0, 0.0)

    def test_deterministic_under_seed(self):
        gt = make_phantom("nested-ellipsoids", (16, 16, 16), seed=0)
        a = acquire_stack(gt, "sagittal", 1.0, 2.0, 0.7, 0.02, seed=9)
        b = acquire_stack(gt, "sagittal", 1.0, 2.0, 0.7, 0.02, seed=9)
        np.testing.assert_array_equal(a.slices, b.slices)
        np.testing.assert_array_equal(a.true_quats, b.true_quats)

    def test_orientations_and_slice_counts(self):
        gt = make_phantom("nested-ellipsoids", (64, 64, 64), seed=0)
        for orientation, through in (("sagittal", 0), ("coronal", 1), ("axial", 2)):
            st = acquire_stack(gt, orientation, 1.0, 4.0, 0.0, 0.0)
            assert st.through_axis == through
            assert st.num_slices == 16  # 64 mm extent / 4 mm thickness
            assert st.slices.shape == (16, 64, 64)

    def test_estimated_equals_true_without_reg_error(self):
        gt = make_phantom("nested-ellipsoids", (16, 16, 16), seed=0)
        st = acquire_stack(gt, "axial", 1.0, 2.0, 1.0, 0.0, seed=4)
        np.testing.assert_array_equal(st.true_quats, st.est_quats)
        np.testing.assert_array_equal(st.true_trans, st.est_trans)
        st2 = acquire_stack(gt, "axial", 1.0, 2.0, 1.0, 0.0, seed=4,
                            reg_error_sigma=0.5)
        assert np.max(np.abs(st2.est_trans - st2.true_trans)) > 0.0


def three_stacks(gt, motion=0.0, noise=0.0, seed=0, thickness=4.0):
    return [
        acquire_stack(gt, o, 1.0, thickness, motion, noise, seed=seed + k)
        for k, o in enumerate(("axial", "coronal", "sagittal"))
    ]


class TestDevoxelize:
    def test_threshold_zero_keeps_all_positive(self):
        gt = make_phantom("nested-ellipsoids", (16, 16, 16), seed=0)
        gt.data[:] = 0.5  # constant positive
        stacks = three_stacks(gt)
        cloud = devoxelize(stacks, foreground_threshold=0.0)
        total = sum(st.slices.size for st in stacks)
        assert len(cloud) == total

    def test_threshold_one_empty(self):
        gt = make_phantom("nested-ellipsoids", (16, 16, 16), seed=0)
        stacks = three_stacks(gt)
        with pytest.raises(EmptyForeground):
            devoxelize(stacks, foreground_threshold=1.0)

    def test_coords_inside_unit_cube(self):
        gt = make_phantom("nested-ellipsoids", (24, 24, 24), seed=1)
        stacks = three_stacks(gt)
        cloud = devoxelize(stacks, foreground_threshold=-1.0)
        assert np.all(np.abs(cloud.coords) <= 0.98 + 1e-12)
        assert np.all(cloud.intensities >= 0.0)
        assert np.all(cloud.intensities <= 1.0)

    def test_world_roundtrip(self):
        gt = make_phantom("nested-ellipsoids", (20, 20, 20), seed=1)
        stacks = three_stacks(gt)[:1]
        cloud = devoxelize(stacks, foreground_threshold=-1.0)
        world = cloud.world_map.to_world(cloud.coords)
        back = cloud.world_map.to_normalized(world)
        np.testing.assert_allclose(back, cloud.coords, atol=1e-10)
        # recover the exact voxel centers of the single stack
        got = np.unique(np.round(world[:, 2], 9))
        want = stacks[0].slice_center(np.arange(stacks[0].num_slices))
        np.testing.assert_allclose(np.sort(got), np.sort(want), atol=1e-9)

    def test_sample_points_accessible(self):
        gt = make_phantom("nested-ellipsoids", (16, 16, 16), seed=1)
        stacks = three_stacks(gt)
        cloud = devoxelize(stacks, foreground_threshold=0.05)
        sp = cloud[0]
        assert sp.coord.shape == (3,)
        assert 0.0 <= sp.intensity <= 1.0
        assert sp.slice_id >= 0

    def test_slice_ids_are_global(self):
        gt = make_phantom("nested-ellipsoids", (16, 16, 16), seed=1)
        stacks = three_stacks(gt, thickness=2.0)
        cloud = devoxelize(stacks, foreground_threshold=-1.0)
        assert cloud.num_slices == sum(st.num_slices for st in stacks)
        assert cloud.slice_ids.max() == cloud.num_slices - 1


class TestTransformConsistency:
    def test_observation_matches_gt_at_transformed_position(self):
        """With a single-tap slab and rigid motion, the observed sample
        equals the ground truth sampled at T_k(sample coordinate)."""
        gt = make_phantom("nested-ellipsoids", (32, 32, 32), seed=6)
        stacks = [acquire_stack(gt, "axial", 1.0, 1.0, motion_sigma=1.0,
                                noise_sigma=0.0, seed=13)]
        cloud = devoxelize(stacks, foreground_threshold=0.05)
        ts = normalized_transforms(stacks, cloud.world_map, "estimated")
        picks = np.random.default_rng(0).integers(0, len(cloud), 500)
        for i in picks:
            sid = cloud.slice_ids[i]
            t = ts.to_list()[sid]
            moved_norm = apply_rigid(t, cloud.coords[i])
            world = cloud.world_map.to_world(moved_norm)
            idx = (world - gt.origin) / gt.spacing
            want = trilinear_sample(gt.data, idx[None, :])[0]
            got = cloud.intensities[i] * cloud.intensity_scale
            np.testing.assert_allclose(got, want, atol=1e-9)

    def test_identity_motion_gives_identity_transforms(self):
        gt = make_phantom("nested-ellipsoids", (16, 16, 16), seed=0)
        stacks = three_stacks(gt, motion=0.0)
        wm = stacks_world_map(stacks)
        ts = normalized_transforms(stacks, wm, "estimated")
        np.testing.assert_allclose(ts.quats[:, 0], 1.0, atol=1e-15)
        np.testing.assert_allclose(ts.quats[:, 1:], 0.0, atol=1e-15)
        np.testing.assert_allclose(ts.translations, 0.0, atol=1e-15)


class TestSliceGrids:
    def test_grid_shapes_and_targets(self):
        gt = make_phantom("nested-ellipsoids", (16, 16, 16), seed=0)
        stacks = three_stacks(gt)
        cloud = devoxelize(stacks, foreground_threshold=-1.0)
        grids = build_slice_grids(stacks, cloud.world_map, cloud.intensity_scale)
        assert len(grids) == cloud.num_slices
        g0 = grids[0]
        assert g0.coords.shape == (16 * 16, 3)
        assert g0.target.shape == (16, 16)
        # grid coords of slice 0 appear among the cloud coords for slice 0
        mask = cloud.slice_ids == 0
        np.testing.assert_allclose(
            np.sort(cloud.coords[mask, 0]), np.sort(g0.coords[:, 0]), atol=1e-12
        )


class TestFusionBaseline:
    def test_perfect_recovery_in_degenerate_case(self):
        """Thickness = spacing, no motion: fusing three orthogonal stacks
        reproduces the ground truth exactly at the source grid."""
        gt = make_phantom("nested-ellipsoids", (16, 16, 16), seed=3)
        stacks = three_stacks(gt, thickness=1.0)
        fused = fuse_trilinear(stacks, (16, 16, 16), gt.spacing, gt.origin)
        np.testing.assert_allclose(fused.data, gt.data, atol=1e-9)

    def test_runs_on_anisotropic_stacks(self):
        gt = make_phantom("nested-ellipsoids", (32, 32, 32), seed=3)
        stacks = three_stacks(gt, motion=0.5, noise=0.005, seed=5)
        fused = fuse_trilinear(stacks, (32, 32, 32), gt.spacing, gt.origin)
        assert fused.data.shape == (32, 32, 32)
        err = np.sqrt(np.mean((fused.data - gt.data) ** 2))
        assert err < 0.2  # crude but sane reconstruction
