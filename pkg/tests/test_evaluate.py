import numpy as np
import pytest

from vfa_motion.evaluate import MaeReport, condition_table, mae, reference_map, write_table_csv
from vfa_motion.volume import Volume

from _helpers import make_grid


def vol(data, grid):
    return Volume(np.asarray(data, dtype=float), grid)


class TestMae:
    def test_identical_maps_zero_error(self):
        grid = make_grid((4, 4, 4))
        est = vol(np.random.default_rng(0).uniform(0.5, 2.0, size=grid.dims), grid)
        mask = vol(np.ones(grid.dims), grid)
        report = mae(est, est, mask)
        assert report.mae_percent == 0.0
        assert report.n_voxels == 64

    def test_single_voxel_ten_percent(self):
        grid = make_grid((1, 1, 1))
        report = mae(
            vol([[[1.1]]], grid), vol([[[1.0]]], grid), vol([[[1.0]]], grid)
        )
        assert report.mae_percent == pytest.approx(10.0, rel=1e-12)
        assert report.n_voxels == 1

    def test_matches_scalar_loop_reference(self):
        rng = np.random.default_rng(50)
        grid = make_grid((16, 16, 16))
        est_d = rng.uniform(0.5, 2.0, size=grid.dims)
        ref_d = rng.uniform(0.5, 2.0, size=grid.dims)
        mask_d = (rng.random(size=grid.dims) > 0.3).astype(float)
        est_d[0, 0, 0] = np.nan
        ref_d[1, 1, 1] = np.nan
        report = mae(vol(est_d, grid), vol(ref_d, grid), vol(mask_d, grid))
        total, count = 0.0, 0
        for idx in np.ndindex(grid.dims):
            if mask_d[idx] > 0.5 and np.isfinite(est_d[idx]) and np.isfinite(ref_d[idx]):
                total += abs(ref_d[idx] - est_d[idx]) / ref_d[idx]
                count += 1
        assert report.n_voxels == count
        assert report.mae_percent == pytest.approx(100.0 * total / count, rel=1e-12)

    def test_error_volume_consistent_with_mae(self):
        rng = np.random.default_rng(51)
        grid = make_grid((8, 8, 8))
        est = vol(rng.uniform(0.5, 2.0, size=grid.dims), grid)
        ref = vol(rng.uniform(0.5, 2.0, size=grid.dims), grid)
        mask = vol(np.ones(grid.dims), grid)
        report = mae(est, ref, mask)
        finite = np.isfinite(report.error_volume.data)
        assert finite.sum() == report.n_voxels
        recomputed = 100.0 * report.error_volume.data[finite].mean()
        assert report.mae_percent == pytest.approx(recomputed, abs=1e-10)

    def test_scale_invariance(self):
        rng = np.random.default_rng(52)
        grid = make_grid((6, 6, 6))
        est_d = rng.uniform(0.5, 2.0, size=grid.dims)
        ref_d = rng.uniform(0.5, 2.0, size=grid.dims)
        mask = vol(np.ones(grid.dims), grid)
        a = mae(vol(est_d, grid), vol(ref_d, grid), mask)
        b = mae(vol(3.0 * est_d, grid), vol(3.0 * ref_d, grid), mask)
        assert a.mae_percent == pytest.approx(b.mae_percent, rel=1e-14)

    def test_constant_relative_perturbation(self):
        grid = make_grid((5, 5, 5))
        ref_d = np.random.default_rng(53).uniform(0.5, 2.0, size=grid.dims)
        eps = 0.037
        report = mae(vol(ref_d * (1 + eps), grid), vol(ref_d, grid), vol(np.ones(grid.dims), grid))
        assert report.mae_percent == pytest.approx(100.0 * eps, rel=1e-12)

    def test_empty_mask_raises(self):
        grid = make_grid((3, 3, 3))
        ones = vol(np.ones(grid.dims), grid)
        with pytest.raises(ValueError):
            mae(ones, ones, vol(np.zeros(grid.dims), grid))

    def test_nonpositive_reference_rejected(self):
        grid = make_grid((3, 3, 3))
        ones = vol(np.ones(grid.dims), grid)
        bad_ref = vol(np.zeros(grid.dims), grid)
        with pytest.raises(ValueError):
            mae(ones, bad_ref, ones)


class TestReferenceMap:
    def test_single_map_identity(self):
        grid = make_grid((4, 4, 4))
        m = vol(np.random.default_rng(54).uniform(size=grid.dims), grid)
        np.testing.assert_array_equal(reference_map([m]).data, m.data)

    def test_mean_of_two(self):
        grid = make_grid((4, 4, 4))
        m = vol(np.random.default_rng(55).uniform(0.5, 1.5, size=grid.dims), grid)
        out = reference_map([m, vol(3.0 * m.data, grid)])
        np.testing.assert_allclose(out.data, 2.0 * m.data, rtol=1e-14)

    def test_disjoint_nan_patterns_counted_per_voxel(self):
        grid = make_grid((2, 2, 2))
        a = np.full(grid.dims, 1.0)
        b = np.full(grid.dims, 3.0)
        a[0, 0, 0] = np.nan
        b[1, 1, 1] = np.nan
        a[1, 0, 0] = np.nan
        b[1, 0, 0] = np.nan
        out = reference_map([vol(a, grid), vol(b, grid)])
        assert out.data[0, 0, 0] == 3.0
        assert out.data[1, 1, 1] == 1.0
        assert np.isnan(out.data[1, 0, 0])
        assert out.data[0, 1, 0] == 2.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            reference_map([])


def _report(mae_percent, **labels):
    grid = make_grid((1, 1, 1))
    return MaeReport(mae_percent, 1, vol([[[mae_percent]]], grid), labels)


class TestConditionTable:
    def test_single_report_flagged(self):
        rows = condition_table([_report(4.0, method="ratio", motion="no")])
        assert rows[0]["sd_mae_percent"] == 0.0
        assert rows[0]["single_repeat"] is True

    def test_mean_and_sample_sd(self):
        rows = condition_table(
            [_report(4.0, method="ratio"), _report(4.4, method="ratio")]
        )
        assert rows[0]["mean_mae_percent"] == pytest.approx(4.2)
        assert rows[0]["sd_mae_percent"] == pytest.approx(0.2828427, rel=1e-6)
        assert rows[0]["n_repeats"] == 2

    def test_canonical_row_ordering(self):
        reports = [
            _report(5.0, motion="yes", method="generative"),
            _report(3.0, motion="no", method="none"),
            _report(4.0, motion="yes", method="none"),
            _report(3.1, motion="no", method="ratio"),
            _report(4.5, motion="yes", method="ratio"),
            _report(3.2, motion="no", method="generative"),
        ]
        rows = condition_table(reports)
        order = [(r["motion"], r["method"]) for r in rows]
        assert order == [
            ("no", "none"),
            ("no", "ratio"),
            ("no", "generative"),
            ("yes", "none"),
            ("yes", "ratio"),
            ("yes", "generative"),
        ]

    def test_csv_roundtrip(self, tmp_path):
        rows = condition_table(
            [_report(4.0, method="ratio"), _report(4.4, method="ratio")]
        )
        path = write_table_csv(rows, tmp_path / "table.csv")
        text = path.read_text().splitlines()
        assert text[0].startswith("method,")
        assert len(text) == 2


def test_report_save_load(tmp_path):
    report = _report(7.5, method="none", motion="yes")
    path = report.save(tmp_path / "report.json")
    back = MaeReport.load(path)
    assert back.mae_percent == 7.5
    assert back.labels == {"method": "none", "motion": "yes"}
