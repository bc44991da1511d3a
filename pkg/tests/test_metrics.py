"""Quality metrics against scalar re-implementations."""

import math

import numpy as np
import pytest

from mgauss.errors import ConstantInput, ShapeMismatch
from mgauss.metrics import MetricReport, evaluate_volumes, ncc, nrmse, psnr, ssim3d


class TestPsnr:
    def test_identical_is_infinite(self, rng):
        v = rng.uniform(0, 1, (8, 8, 8))
        assert psnr(v, v) == math.inf

    def test_uniform_error_closed_form(self):
        gt = np.full((10, 10, 10), 0.5)
        pred = gt + 0.1
        np.testing.assert_allclose(psnr(pred, gt), 20.0, atol=1e-12)

    def test_matches_scalar_recomputation(self, rng):
        pred = rng.uniform(0, 1, (6, 7, 8))
        gt = rng.uniform(0, 1, (6, 7, 8))
        sq = 0.0
        for i in range(6):
            for j in range(7):
                for k in range(8):
                    sq += (float(pred[i, j, k]) - float(gt[i, j, k])) ** 2
        mse = sq / (6 * 7 * 8)
        np.testing.assert_allclose(psnr(pred, gt), 10 * math.log10(1 / mse),
                                   atol=1e-9)

    def test_symmetry(self, rng):
        a = rng.uniform(0, 1, (8, 8, 8))
        b = rng.uniform(0, 1, (8, 8, 8))
        np.testing.assert_allclose(psnr(a, b), psnr(b, a), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            psnr(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))


class TestNcc:
    def test_identical(self, rng):
        v = rng.uniform(0, 1, (8, 8, 8))
        np.testing.assert_allclose(ncc(v, v), 1.0, atol=1e-12)

    def test_anticorrelation(self, rng):
        gt = rng.uniform(0, 1, (8, 8, 8))
        np.testing.assert_allclose(ncc(1.0 - gt, gt), -1.0, atol=1e-12)

    def test_affine_invariance(self, rng):
        pred = rng.uniform(0, 1, (8, 8, 8))
        gt = rng.uniform(0, 1, (8, 8, 8))
        np.testing.assert_allclose(ncc(3.0 * pred + 0.25, gt), ncc(pred, gt),
                                   atol=1e-9)

    def test_constant_input(self):
        with pytest.raises(ConstantInput):
            ncc(np.full((4, 4, 4), 0.5), np.zeros((4, 4, 4)))

    def test_matches_scalar(self, rng):
        pred = rng.uniform(0, 1, (5, 5, 5)).ravel()
        gt = rng.uniform(0, 1, (5, 5, 5)).ravel()
        mp, mg = pred.mean(), gt.mean()
        num = float(np.sum((pred - mp) * (gt - mg)))
        den = math.sqrt(float(np.sum((pred - mp) ** 2)) * float(np.sum((gt - mg) ** 2)))
        np.testing.assert_allclose(ncc(pred.reshape(5, 5, 5), gt.reshape(5, 5, 5)),
                                   num / den, atol=1e-12)


class TestNrmse:
    def test_identical(self, rng):
        v = rng.uniform(0, 1, (8, 8, 8))
        assert nrmse(v, v) == 0.0

    def test_matches_scalar(self, rng):
        pred = rng.uniform(0, 1, (6, 6, 6))
        gt = rng.uniform(0, 1, (6, 6, 6))
        want = math.sqrt(float(np.mean((pred - gt) ** 2))) / float(gt.max() - gt.min())
        np.testing.assert_allclose(nrmse(pred, gt), want, atol=1e-12)


class TestSsim3d:
    def test_identical(self, rng):
        v = rng.uniform(0, 1, (13, 13, 13))
        np.testing.assert_allclose(ssim3d(v, v), 1.0, atol=1e-12)

    def test_in_range(self, rng):
        a = rng.uniform(0, 1, (14, 14, 14))
        b = rng.uniform(0, 1, (14, 14, 14))
        s = ssim3d(a, b)
        assert -1.0 <= s <= 1.0


class TestReport:
    def test_evaluate_identical(self, rng):
        v = rng.uniform(0.1, 0.9, (12, 12, 12))
        report = evaluate_volumes(v, v)
        assert report.psnr_db == math.inf
        np.testing.assert_allclose(report.ssim, 1.0, atol=1e-12)
        np.testing.assert_allclose(report.ncc, 1.0, atol=1e-12)
        assert report.nrmse == 0.0

    def test_serialization(self):
        r = MetricReport(psnr_db=30.0, ssim=0.95, ncc=0.99, nrmse=0.01,
                         runtime_seconds=1.5)
        text = r.to_text()
        assert "psnr_db = 30" in text
        import json

        d = json.loads(r.to_json())
        assert d["ssim"] == 0.95

    def test_infinite_psnr_serializes(self):
        r = MetricReport(psnr_db=math.inf, ssim=1.0, ncc=1.0, nrmse=0.0)
        assert "inf" in r.to_text()
        import json

        assert json.loads(r.to_json())["psnr_db"] == "inf"
