"""Shared helpers: finite-difference oracles and random model builders."""

import numpy as np
import pytest

from mgauss.core import GaussianField, lattice_node_index


def central_difference(fn, x0, step=1e-5):
    """Central finite-difference gradient of scalar fn at x0 (any shape)."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fplus = fn(x0)
        flat[i] = orig - step
        fminus = fn(x0)
        flat[i] = orig
        gflat[i] = (fplus - fminus) / (2.0 * step)
    return grad


def random_field(rng, side=3, scale_lo=-2.2, scale_hi=-0.7):
    """Small random Gaussian field on a side^3 lattice footprint."""
    n = side**3
    return GaussianField(
        positions=rng.uniform(-0.8, 0.8, (n, 3)),
        quaternions=rng.normal(0.0, 1.0, (n, 4)) + np.array([2.0, 0, 0, 0]),
        log_scales=rng.uniform(scale_lo, scale_hi, (n, 3)),
        intensity_logits=rng.normal(0.0, 1.5, n),
        lattice_dims=(side, side, side),
        lattice_index=lattice_node_index(side),
    ).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(20260808)
