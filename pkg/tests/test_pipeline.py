import numpy as np
import pytest

from vfa_motion.config import sha256_file
from vfa_motion.errors import ConfigError
from vfa_motion.pipeline import (
    BenchmarkConfig,
    PipelineConfig,
    full_benchmark,
    rerun_from_manifest,
    run_pipeline,
)
from vfa_motion.simulate import default_simulation_config, generate_from_config
from vfa_motion.volume import load_volume


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    cfg = default_simulation_config()
    cfg["phantom"]["dims"] = [32, 32, 32]
    cfg["phantom"]["voxel_size_mm"] = [4.0, 4.0, 4.0]
    path = tmp_path_factory.mktemp("data") / "ds"
    generate_from_config(cfg, path, seed=7)
    return path


class TestPipelineConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"dataset": "d", "out_dir": "o", "typo": 1})

    def test_bad_method_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig(dataset="d", out_dir="o", method="magic")

    def test_dict_roundtrip(self):
        config = PipelineConfig(
            dataset="d", out_dir="o", method="ratio", b1_mode="per-contrast",
            labels={"motion": "yes"},
        )
        back = PipelineConfig.from_dict(config.to_dict())
        assert back == config


class TestRunPipeline:
    @pytest.mark.parametrize("method", ["none", "ratio", "generative"])
    def test_methods_produce_reports_and_outputs(self, small_dataset, tmp_path, method):
        config = PipelineConfig(
            dataset=str(small_dataset), out_dir=str(tmp_path / method), method=method
        )
        result = run_pipeline(config)
        assert result.report.mae_percent > 0
        assert (result.run_dir / "r1.raw").exists()
        assert (result.run_dir / "report.json").exists()
        assert (result.run_dir / "manifest.json").exists()
        if method != "none":
            assert (result.run_dir / "delta.raw").exists()
        if method == "generative":
            assert (result.run_dir / "mean.raw").exists()

    def test_correction_reduces_mae_under_motion(self, small_dataset, tmp_path):
        uncorrected = run_pipeline(
            PipelineConfig(dataset=str(small_dataset), out_dir=str(tmp_path / "none"))
        )
        ratio = run_pipeline(
            PipelineConfig(
                dataset=str(small_dataset), out_dir=str(tmp_path / "ratio"), method="ratio"
            )
        )
        assert ratio.report.mae_percent < uncorrected.report.mae_percent

    def test_rerun_is_byte_identical(self, small_dataset, tmp_path):
        config = PipelineConfig(
            dataset=str(small_dataset), out_dir=str(tmp_path / "a"), method="ratio"
        )
        first = run_pipeline(config)
        second = rerun_from_manifest(first.run_dir / "manifest.json", out_dir=tmp_path / "b")
        assert first.outputs == second.outputs
        for rel in first.outputs:
            assert sha256_file(tmp_path / "a" / rel) == sha256_file(tmp_path / "b" / rel)

    def test_delta_archived_for_both_methods(self, small_dataset, tmp_path):
        for method in ("ratio", "generative"):
            result = run_pipeline(
                PipelineConfig(
                    dataset=str(small_dataset),
                    out_dir=str(tmp_path / f"m_{method}"),
                    method=method,
                )
            )
            delta = load_volume(result.run_dir / "delta")
            finite = np.isfinite(delta.data)
            assert finite.any()
            assert delta.data[finite].min() > 0


class TestBenchmark:
    def test_default_grid_has_twelve_conditions(self, tmp_path):
        config = BenchmarkConfig(
            out_dir=str(tmp_path / "bench"),
            repeats=1,
            sim={"phantom": {"dims": [16, 16, 16], "voxel_size_mm": [8.0, 8.0, 8.0]}},
        )
        rows, reports = full_benchmark(config)
        assert len(rows) == 12
        assert len(reports) == 12

    def test_noiseless_still_uncorrected_within_estimator_bias(self, tmp_path):
        cfg = default_simulation_config()
        cfg["phantom"]["dims"] = [32, 32, 32]
        cfg["phantom"]["voxel_size_mm"] = [4.0, 4.0, 4.0]
        cfg["motion"]["snr"] = None
        cfg["motion"]["transforms"] = [
            {"euler_zyx_deg": [0, 0, 0], "translation_mm": [0, 0, 0]} for _ in range(2)
        ]
        cfg["sensitivity"]["log_coeffs"] = [{}, {}]
        dataset = tmp_path / "ds"
        generate_from_config(cfg, dataset, seed=1)
        result = run_pipeline(
            PipelineConfig(dataset=str(dataset), out_dir=str(tmp_path / "run"))
        )
        assert result.report.mae_percent < 3.0

    def test_grid_and_table(self, tmp_path):
        config = BenchmarkConfig(
            out_dir=str(tmp_path / "bench"),
            repeats=2,
            methods=("none", "ratio"),
            motion=("no", "yes"),
            b1_modes=("shared",),
            sim={"phantom": {"dims": [32, 32, 32], "voxel_size_mm": [4.0, 4.0, 4.0]}},
        )
        rows, reports = full_benchmark(config)
        assert len(rows) == 4
        assert len(reports) == 8
        assert (tmp_path / "bench" / "table.csv").exists()
        order = [(r["motion"], r["method"]) for r in rows]
        assert order == [("no", "none"), ("no", "ratio"), ("yes", "none"), ("yes", "ratio")]
        for row in rows:
            assert row["n_repeats"] == 2

    def test_still_condition_statistically_matches_identity_motion(self, tmp_path):
        # all-identity "motion" must behave like the no-motion condition
        config = BenchmarkConfig(
            out_dir=str(tmp_path / "bench"),
            repeats=3,
            methods=("none",),
            motion=("no", "yes"),
            b1_modes=("shared",),
            sim={
                "phantom": {"dims": [32, 32, 32], "voxel_size_mm": [4.0, 4.0, 4.0]},
                "sensitivity": {
                    "log_coeffs": [{"x": 0.15, "xx": 0.05}, {"x": 0.15, "xx": 0.05}]
                },
                "motion": {
                    "transforms": [
                        {"euler_zyx_deg": [0, 0, 0], "translation_mm": [0, 0, 0]},
                        {"euler_zyx_deg": [0, 0, 0], "translation_mm": [0, 0, 0]},
                    ]
                },
            },
        )
        rows, _ = full_benchmark(config)
        still = next(r for r in rows if r["motion"] == "no")
        moved = next(r for r in rows if r["motion"] == "yes")
        spread = 2.0 * (still["sd_mae_percent"] + moved["sd_mae_percent"])
        assert abs(still["mean_mae_percent"] - moved["mean_mae_percent"]) <= max(spread, 0.05)

    def test_unknown_sim_override_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            full_benchmark(
                BenchmarkConfig(out_dir=str(tmp_path / "b"), sim={"nope": {}})
            )

    def test_worker_env_does_not_change_results(self, tmp_path, monkeypatch):
        sim = {"phantom": {"dims": [24, 24, 24], "voxel_size_mm": [4.0, 4.0, 4.0]}}
        config_serial = BenchmarkConfig(
            out_dir=str(tmp_path / "serial"), repeats=1, methods=("none", "ratio"),
            motion=("yes",), b1_modes=("shared",), sim=sim,
        )
        monkeypatch.setenv("VFA_MOTION_THREADS", "1")
        rows_serial, _ = full_benchmark(config_serial)
        config_parallel = BenchmarkConfig(
            out_dir=str(tmp_path / "parallel"), repeats=1, methods=("none", "ratio"),
            motion=("yes",), b1_modes=("shared",), sim=sim,
        )
        monkeypatch.setenv("VFA_MOTION_THREADS", "2")
        rows_parallel, _ = full_benchmark(config_parallel)
        for a, b in zip(rows_serial, rows_parallel):
            assert a["mean_mae_percent"] == b["mean_mae_percent"]
