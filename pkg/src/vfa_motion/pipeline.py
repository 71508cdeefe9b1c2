"""Reproducible correction pipeline and benchmark grid.

A pipeline run reslices one dataset's acquisitions to the reference grid,
estimates the relative receive sensitivity with the configured method,
computes the R1 map and evaluates it against the dataset truth. Every run
writes a manifest with the config hash and the digest of each output, and
reruns under a fixed seed are byte-identical.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__
from .config import (
    config_hash,
    read_json,
    reject_unknown_keys,
    require_keys,
    sha256_file,
    write_json,
)
from .errors import ConfigError
from .evaluate import MaeReport, condition_table, mae, write_table_csv
from .genmodel import FitConfig, fit as fit_genmodel, relative_sensitivity
from .ratio import CalibrationImage, ratio_relative_sensitivity, upsample_delta
from .signal import B1Map, VfaAcquisition, r1_vfa
from .simulate import SimDataset, generate_from_config, default_simulation_config, load_dataset
from .volume import coarsen_grid, reslice, save_volume

__all__ = [
    "PipelineConfig",
    "RunResult",
    "run_pipeline",
    "rerun_from_manifest",
    "BenchmarkConfig",
    "full_benchmark",
]

_METHODS = ("none", "ratio", "generative")
_B1_MODES = ("shared", "per-contrast")
_THREADS_ENV = "VFA_MOTION_THREADS"


@dataclass(frozen=True)
class PipelineConfig:
    """One correction run: dataset, method, transmit handling, parameters."""

    dataset: str
    out_dir: str
    method: str = "none"
    b1_mode: str = "shared"
    fwhm_mm: float = 12.0
    lambda_array: float = 1e3
    lambda_body: float = 1e8
    iterations: int = 15
    seed: int = 0
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ConfigError(f"method must be one of {_METHODS}, got {self.method!r}")
        if self.b1_mode not in _B1_MODES:
            raise ConfigError(f"b1_mode must be one of {_B1_MODES}, got {self.b1_mode!r}")
        if self.fwhm_mm < 0:
            raise ConfigError("fwhm_mm must be >= 0")

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "dataset": str(self.dataset),
            "out_dir": str(self.out_dir),
            "method": self.method,
            "b1_mode": self.b1_mode,
            "fwhm_mm": self.fwhm_mm,
            "lambda_array": self.lambda_array,
            "lambda_body": self.lambda_body,
            "iterations": self.iterations,
            "seed": self.seed,
            "labels": dict(self.labels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        reject_unknown_keys(
            d,
            (
                "schema_version",
                "dataset",
                "out_dir",
                "method",
                "b1_mode",
                "fwhm_mm",
                "lambda_array",
                "lambda_body",
                "iterations",
                "seed",
                "labels",
            ),
            "pipeline config",
        )
        require_keys(d, ("dataset", "out_dir"), "pipeline config")
        if d.get("schema_version", 1) != 1:
            raise ConfigError(f"unsupported schema_version {d.get('schema_version')}")
        kwargs = {k: v for k, v in d.items() if k != "schema_version"}
        return cls(**kwargs)


@dataclass(eq=False)
class RunResult:
    run_dir: Path
    report: MaeReport
    outputs: dict


def _estimate_delta(config: PipelineConfig, ds: SimDataset, calib_ref, out_dir: Path):
    """Relative sensitivity of the first contrast versus the second, on the
    calibration grid, plus any method diagnostics."""
    if config.method == "ratio":
        delta = ratio_relative_sensitivity(calib_ref[0], calib_ref[1], fwhm_mm=config.fwhm_mm)
        return delta, {}
    fit_config = FitConfig(
        lambda_array=config.lambda_array,
        lambda_body=config.lambda_body,
        iterations=config.iterations,
    )
    images = [
        CalibrationImage(vol, coil=ds.calib(k).coil, position_index=k)
        for k, vol in enumerate(calib_ref)
    ]
    state = fit_genmodel(images, fit_config)
    delta = relative_sensitivity(state, 0, 1)
    diagnostics = {
        "objective_trace": state.objective_trace,
        "noise_var": state.noise_var,
        "lambdas": [f.lam for f in state.fields],
    }
    for k, f in enumerate(state.fields):
        save_volume(f.log_field, out_dir / f"logsens_{k + 1}", intent="log_sensitivity")
        save_volume(f.sensitivity(), out_dir / f"sens_{k + 1}", intent="sensitivity")
    save_volume(state.mean, out_dir / "mean", intent="mean_image")
    return delta, diagnostics


def run_pipeline(config: PipelineConfig) -> RunResult:
    """Execute reslice -> sensitivity estimation -> R1 -> evaluation."""
    ds = load_dataset(config.dataset)
    if ds.n_positions != 2:
        raise ConfigError(
            f"R1 pipeline needs a two-position dataset, got {ds.n_positions}"
        )
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    truth_r1 = ds.truth_r1()
    ref_grid = truth_r1.grid
    calib_grid = coarsen_grid(ref_grid, ds.calib_res_factor)

    vfa_ref, b1_ref, calib_ref = [], [], []
    for k in range(2):
        t_k = ds.transform(k)
        vfa_ref.append(reslice(ds.vfa(k).image, t_k, ref_grid))
        b1_ref.append(reslice(ds.b1(k).ft, t_k, ref_grid))
        calib_ref.append(reslice(ds.calib(k).image, t_k, calib_grid))

    diagnostics: dict = {}
    if config.method == "none":
        delta_fine = None
    else:
        delta_coarse, diagnostics = _estimate_delta(config, ds, calib_ref, out_dir)
        save_volume(delta_coarse, out_dir / "delta_calib", intent="delta")
        delta_fine = upsample_delta(delta_coarse, ref_grid)
        save_volume(delta_fine, out_dir / "delta", intent="delta")

    pdw_meta = ds.vfa(0)
    t1w_meta = ds.vfa(1)
    pdw = VfaAcquisition(vfa_ref[0], pdw_meta.flip_angle_deg, pdw_meta.tr_s, pdw_meta.label)
    t1w = VfaAcquisition(vfa_ref[1], t1w_meta.flip_angle_deg, t1w_meta.tr_s, t1w_meta.label)
    ft_pdw = B1Map(b1_ref[0])
    ft_t1w = B1Map(b1_ref[1]) if config.b1_mode == "per-contrast" else "shared"

    r1 = r1_vfa(pdw, t1w, delta=delta_fine, ft_pdw=ft_pdw, ft_t1w=ft_t1w)
    save_volume(r1, out_dir / "r1", intent="r1_map")

    labels = {
        "method": config.method,
        "b1_mode": config.b1_mode,
        **{str(k): str(v) for k, v in config.labels.items()},
    }
    report = mae(r1, truth_r1, ds.truth_mask(), labels=labels)
    save_volume(report.error_volume, out_dir / "error", intent="error_map")
    report.save(out_dir / "report.json")

    outputs = {
        str(p.relative_to(out_dir)): sha256_file(p)
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "kind": "vfa-motion-run",
        "version": __version__,
        "config": config.to_dict(),
        "config_sha256": config_hash(config.to_dict()),
        "dataset_manifest_sha256": sha256_file(Path(config.dataset) / "manifest.json"),
        "diagnostics": diagnostics,
        "outputs": outputs,
    }
    write_json(manifest, out_dir / "manifest.json")
    return RunResult(out_dir, report, outputs)


def rerun_from_manifest(manifest_path, out_dir=None) -> RunResult:
    """Re-execute a recorded run; with a fixed dataset this is bit-exact."""
    manifest = read_json(manifest_path)
    if manifest.get("kind") != "vfa-motion-run":
        raise ConfigError(f"{manifest_path} is not a run manifest")
    config = PipelineConfig.from_dict(manifest["config"])
    if out_dir is not None:
        config = replace(config, out_dir=str(out_dir))
    return run_pipeline(config)


@dataclass(frozen=True)
class BenchmarkConfig:
    """Condition grid: motion on/off x correction method x transmit mode.

    The default ``lambda_array`` is stiffer than the fit module's default:
    the synthetic calibration grid is coarse (8 mm) and its air boundary is
    sharp, which rewards stronger field smoothing.
    """

    out_dir: str
    seed: int = 42
    repeats: int = 3
    motion: tuple[str, ...] = ("no", "yes")
    methods: tuple[str, ...] = ("none", "ratio", "generative")
    b1_modes: tuple[str, ...] = ("shared", "per-contrast")
    fwhm_mm: float = 12.0
    lambda_array: float = 3e3
    lambda_body: float = 1e8
    iterations: int = 15
    sim: dict = field(default_factory=dict)

    def __post_init__(self):
        for m in self.methods:
            if m not in _METHODS:
                raise ConfigError(f"unknown method {m!r}")
        for b in self.b1_modes:
            if b not in _B1_MODES:
                raise ConfigError(f"unknown b1_mode {b!r}")
        for m in self.motion:
            if m not in ("no", "yes"):
                raise ConfigError(f"motion entries must be 'no' or 'yes', got {m!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "out_dir": str(self.out_dir),
            "seed": self.seed,
            "repeats": self.repeats,
            "motion": list(self.motion),
            "methods": list(self.methods),
            "b1_modes": list(self.b1_modes),
            "fwhm_mm": self.fwhm_mm,
            "lambda_array": self.lambda_array,
            "lambda_body": self.lambda_body,
            "iterations": self.iterations,
            "sim": dict(self.sim),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        reject_unknown_keys(
            d,
            (
                "schema_version",
                "out_dir",
                "seed",
                "repeats",
                "motion",
                "methods",
                "b1_modes",
                "fwhm_mm",
                "lambda_array",
                "lambda_body",
                "iterations",
                "sim",
            ),
            "benchmark config",
        )
        require_keys(d, ("out_dir",), "benchmark config")
        if d.get("schema_version", 1) != 1:
            raise ConfigError(f"unsupported schema_version {d.get('schema_version')}")
        kwargs = {k: v for k, v in d.items() if k != "schema_version"}
        for key in ("motion", "methods", "b1_modes"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _merge_sim_config(base: dict, overrides: dict) -> dict:
    merged = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    reject_unknown_keys(overrides, base, "benchmark sim overrides")
    for key, value in overrides.items():
        if isinstance(value, dict):
            merged[key] = {**merged.get(key, {}), **value}
        else:
            merged[key] = value
    return merged


def _still_variant(sim_config: dict) -> dict:
    """No-motion condition: identity poses, one shared coil configuration."""
    still = {k: (dict(v) if isinstance(v, dict) else v) for k, v in sim_config.items()}
    motion = dict(still["motion"])
    n = len(motion["transforms"])
    motion["transforms"] = [
        {"rotation": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
         "translation_mm": [0.0, 0.0, 0.0]}
        for _ in range(n)
    ]
    transmit = motion.get("transmit")
    if transmit:
        motion["transmit"] = [dict(transmit[0]) for _ in range(n)]
    still["motion"] = motion
    sens = dict(still["sensitivity"])
    sens["log_coeffs"] = [dict(sens["log_coeffs"][0]) for _ in range(n)]
    still["sensitivity"] = sens
    return still


def _run_cell(args: tuple) -> str:
    config_dict = args[0]
    result = run_pipeline(PipelineConfig.from_dict(config_dict))
    return str(result.run_dir / "report.json")


def full_benchmark(config: BenchmarkConfig) -> tuple[list[dict], list[MaeReport]]:
    """Run the full condition grid and emit the condition table.

    Datasets are simulated per (motion, repeat); every (method, b1_mode)
    cell runs on the same dataset so conditions differ only in the
    correction. ``VFA_MOTION_THREADS`` caps process-level parallelism over
    cells; outputs are identical regardless of the worker count.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(config.to_dict(), out_dir / "benchmark_config.json")

    base_sim = {
        k: v for k, v in default_simulation_config().items() if k != "seed"
    }
    moving_sim = _merge_sim_config(base_sim, config.sim)
    still_sim = _still_variant(moving_sim)

    datasets: dict[tuple[str, int], Path] = {}
    for motion in config.motion:
        sim = still_sim if motion == "no" else moving_sim
        for rep in range(config.repeats):
            path = out_dir / "datasets" / f"motion-{motion}_rep-{rep}"
            generate_from_config(sim, path, seed=config.seed + rep)
            datasets[(motion, rep)] = path

    cells = []
    for motion in config.motion:
        for rep in range(config.repeats):
            for method in config.methods:
                for b1_mode in config.b1_modes:
                    run_dir = (
                        out_dir
                        / "runs"
                        / f"motion-{motion}_rep-{rep}_method-{method}_b1-{b1_mode}"
                    )
                    cell_config = PipelineConfig(
                        dataset=str(datasets[(motion, rep)]),
                        out_dir=str(run_dir),
                        method=method,
                        b1_mode=b1_mode,
                        fwhm_mm=config.fwhm_mm,
                        lambda_array=config.lambda_array,
                        lambda_body=config.lambda_body,
                        iterations=config.iterations,
                        seed=config.seed + rep,
                        labels={"motion": motion, "repeat": str(rep)},
                    )
                    cells.append((cell_config.to_dict(),))

    workers = int(os.environ.get(_THREADS_ENV, "1") or "1")
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            report_paths = list(pool.map(_run_cell, cells))
    else:
        report_paths = [_run_cell(cell) for cell in cells]

    reports = [MaeReport.load(p) for p in sorted(report_paths)]
    rows = condition_table(reports, group_keys=("motion", "method", "b1_mode"))
    write_table_csv(rows, out_dir / "table.csv")
    write_json(rows, out_dir / "table.json")
    return rows, reports
