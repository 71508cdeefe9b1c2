import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vfa_motion.estimators import GenerativeSensitivity, RatioSensitivity
from vfa_motion.ratio import CalibrationImage, ratio_relative_sensitivity
from vfa_motion.volume import coarsen_grid

from _helpers import make_grid, volume_from_function


def anatomy(grid, scale=50.0):
    return volume_from_function(
        grid, lambda x, y, z: scale * (1.0 + 0.25 * np.sin(0.03 * x) + 0.15 * np.cos(0.02 * y))
    )


def modulated_pair(grid):
    base = anatomy(grid)
    s1 = volume_from_function(grid, lambda x, y, z: np.exp(0.003 * x))
    s2 = volume_from_function(grid, lambda x, y, z: np.exp(-0.003 * x))
    x1 = base.with_data(base.data * s1.data)
    x2 = base.with_data(base.data * s2.data)
    return x1, x2, s1, s2


class TestRatioSensitivity:
    def test_get_set_params_and_clone(self):
        est = RatioSensitivity(fwhm_mm=8.0, reference_index=1)
        assert est.get_params() == {"fwhm_mm": 8.0, "reference_index": 1}
        dup = clone(est)
        assert dup.get_params() == est.get_params()
        est.set_params(fwhm_mm=0.0)
        assert est.fwhm_mm == 0.0

    def test_not_fitted_raises(self):
        with pytest.raises(NotFittedError):
            RatioSensitivity().relative_sensitivity(0)

    def test_fit_returns_self_and_matches_function_api(self):
        grid = make_grid((12, 12, 12), voxel=(8.0, 8.0, 8.0))
        x1, x2, _, _ = modulated_pair(grid)
        est = RatioSensitivity(fwhm_mm=12.0, reference_index=1)
        assert est.fit([x1, x2]) is est
        got = est.relative_sensitivity(0)
        want = ratio_relative_sensitivity(x1, x2, fwhm_mm=12.0)
        np.testing.assert_allclose(got.data, want.data, rtol=1e-12)

    def test_transform_restores_common_modulation(self):
        grid = make_grid((12, 12, 12), voxel=(8.0, 8.0, 8.0))
        x1, x2, s1, s2 = modulated_pair(grid)
        est = RatioSensitivity(fwhm_mm=0.0, reference_index=1).fit([x1, x2])
        c1, c2 = est.transform([x1, x2])
        # both corrected images now carry the reference modulation s2
        np.testing.assert_allclose(c1.data, c2.data * (x1.data / x2.data) / (s1.data / s2.data), rtol=1e-10)
        np.testing.assert_allclose(c1.data / c2.data, 1.0, rtol=1e-10)

    def test_transform_upsamples_to_target_grid(self):
        fine = make_grid((16, 16, 16), voxel=(2.0, 2.0, 2.0))
        coarse = coarsen_grid(fine, 4)
        x1c, x2c, _, _ = modulated_pair(coarse)
        x1f, x2f, _, _ = modulated_pair(fine)
        est = RatioSensitivity(fwhm_mm=0.0).fit([x1c, x2c])
        out = est.transform([x1f, x2f])
        assert out[0].grid.same_geometry(fine)
        assert np.isfinite(out[0].data).any()

    def test_accepts_calibration_images(self):
        grid = make_grid((8, 8, 8), voxel=(8.0, 8.0, 8.0))
        x1, x2, _, _ = modulated_pair(grid)
        est = RatioSensitivity(fwhm_mm=0.0)
        est.fit([CalibrationImage(x1), CalibrationImage(x2, position_index=1)])
        assert est.n_images_ == 2


class TestGenerativeSensitivity:
    def test_params_roundtrip(self):
        est = GenerativeSensitivity(lambda_array=500.0, n_iter=7)
        params = est.get_params()
        assert params["lambda_array"] == 500.0 and params["n_iter"] == 7
        clone(est)

    def test_not_fitted_raises(self):
        with pytest.raises(NotFittedError):
            GenerativeSensitivity().transform([])

    def test_fit_exposes_state(self):
        grid = make_grid((10, 10, 10), voxel=(8.0, 8.0, 8.0))
        x1, x2, s1, s2 = modulated_pair(grid)
        est = GenerativeSensitivity(n_iter=10).fit([x1, x2])
        assert est.n_images_ == 2
        assert len(est.objective_trace_) == 11
        assert len(est.sensitivity_) == 2
        delta = est.relative_sensitivity(0, 1)
        truth = s1.data / s2.data
        rel = np.abs(delta.data - truth) / truth
        assert np.median(rel) < 0.02

    def test_coil_labels_select_weights(self):
        grid = make_grid((8, 8, 8), voxel=(8.0, 8.0, 8.0))
        x1, x2, _, _ = modulated_pair(grid)
        est = GenerativeSensitivity(n_iter=2).fit([x1, x2], coil=["array", "body"])
        assert est.fields_[0].lam == est.lambda_array
        assert est.fields_[1].lam == est.lambda_body

    def test_transform_divides_out_sensitivity(self):
        grid = make_grid((10, 10, 10), voxel=(8.0, 8.0, 8.0))
        x1, x2, _, _ = modulated_pair(grid)
        est = GenerativeSensitivity(n_iter=10).fit([x1, x2])
        c1, c2 = est.transform([x1, x2])
        # corrected images share the mean image's modulation
        rel = np.abs(c1.data - c2.data) / np.abs(c2.data)
        assert np.median(rel) < 0.02
