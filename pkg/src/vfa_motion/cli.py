"""Command-line front end.

Subcommands cover the full workflow: ``simulate`` datasets, ``reslice``
volumes, estimate sensitivities (``ratio-sens``, ``fit-sens``), compute R1
maps (``compute-r1``), ``evaluate`` them, ``tabulate`` reports, and run
whole pipelines (``run``) or condition grids (``benchmark``).

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__, genmodel
from .config import read_json, write_json
from .errors import ConfigError, FitError, GeometryError, SolverError
from .evaluate import MaeReport, condition_table, mae, tissue_histograms, write_table_csv
from .pipeline import BenchmarkConfig, PipelineConfig, full_benchmark, run_pipeline
from .ratio import CalibrationImage, ratio_relative_sensitivity
from .signal import B1Map, load_acquisition, r1_vfa
from .simulate import default_simulation_config, generate_from_config
from .volume import RigidTransform, load_volume, reslice, save_volume


def _load_transform(path: str, position: int | None) -> RigidTransform:
    payload = read_json(path)
    if "positions" in payload:
        if position is None:
            raise ConfigError(
                f"{path} holds {len(payload['positions'])} transforms; pass --position"
            )
        payload = payload["positions"][position]
    if "euler_zyx_deg" in payload:
        return RigidTransform.from_euler_deg(
            payload["euler_zyx_deg"], payload.get("translation_mm", (0.0, 0.0, 0.0))
        )
    return RigidTransform.from_dict(payload)


def _parse_labels(text: str | None) -> dict:
    labels = {}
    if text:
        for item in text.split(","):
            if "=" not in item:
                raise ConfigError(f"labels must be key=value pairs, got {item!r}")
            key, value = item.split("=", 1)
            labels[key.strip()] = value.strip()
    return labels


def _cmd_simulate(args) -> int:
    config = read_json(args.config) if args.config else default_simulation_config()
    out = generate_from_config(config, args.out_dir, seed=args.seed)
    print(f"dataset written to {out}")
    return 0


def _cmd_reslice(args) -> int:
    src = load_volume(args.input)
    target = load_volume(args.target).grid
    transform = _load_transform(args.transform, args.position)
    if args.inverse:
        transform = transform.inverse()
    out = save_volume(reslice(src, transform, target), args.out, intent="resliced")
    print(f"resliced volume written to {out}")
    return 0


def _cmd_ratio_sens(args) -> int:
    moving = CalibrationImage(load_volume(args.moving))
    reference = CalibrationImage(load_volume(args.reference))
    delta = ratio_relative_sensitivity(moving, reference, fwhm_mm=args.fwhm)
    save_volume(delta, args.out, intent="delta")
    print(f"relative sensitivity written to {args.out}")
    return 0


def _cmd_fit_sens(args) -> int:
    images = [
        CalibrationImage(load_volume(p), coil="array", position_index=i)
        for i, p in enumerate(args.images)
    ]
    for j, p in enumerate(args.body or []):
        images.append(
            CalibrationImage(load_volume(p), coil="body", position_index=len(args.images) + j)
        )
    config = genmodel.FitConfig(
        lambda_array=args.lambda_array,
        lambda_body=args.lambda_body,
        iterations=args.iters,
    )
    state = genmodel.fit(images, config)
    out_dir = Path(args.out_dir)
    save_volume(state.mean, out_dir / "mean", intent="mean_image")
    for k, fld in enumerate(state.fields):
        save_volume(fld.sensitivity(), out_dir / f"sens_{k + 1}", intent="sensitivity")
        save_volume(fld.log_field, out_dir / f"logsens_{k + 1}", intent="log_sensitivity")
    write_json(
        {
            "objective_trace": state.objective_trace,
            "noise_var": state.noise_var,
            "lambdas": [fld.lam for fld in state.fields],
            "config": {
                "lambda_array": args.lambda_array,
                "lambda_body": args.lambda_body,
                "iterations": args.iters,
            },
        },
        out_dir / "trace.json",
    )
    print(f"fitted {len(state.fields)} sensitivity fields into {out_dir}")
    return 0


def _cmd_compute_r1(args) -> int:
    pdw = load_acquisition(args.pdw)
    t1w = load_acquisition(args.t1w)
    delta = load_volume(args.delta) if args.delta else None
    ft_pdw = B1Map(load_volume(args.b1_pdw)) if args.b1_pdw else None
    ft_t1w = B1Map(load_volume(args.b1_t1w)) if args.b1_t1w else "shared"
    r1 = r1_vfa(pdw, t1w, delta=delta, ft_pdw=ft_pdw, ft_t1w=ft_t1w, clamp=args.clamp)
    save_volume(r1, args.out, intent="r1_map")
    print(f"R1 map written to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    estimate = load_volume(args.estimate)
    reference = load_volume(args.reference)
    mask = load_volume(args.mask)
    report = mae(estimate, reference, mask, labels=_parse_labels(args.labels))
    report.save(args.out)
    if args.error_out:
        save_volume(report.error_volume, args.error_out, intent="error_map")
    if args.histogram:
        if not args.labels_volume:
            raise ConfigError("--histogram needs --labels-volume")
        rows = tissue_histograms(estimate, load_volume(args.labels_volume))
        write_table_csv(rows, args.histogram)
    print(
        f"MAE {report.mae_percent:.3f} percent over {report.n_voxels} voxels "
        f"-> {args.out}"
    )
    return 0


def _cmd_tabulate(args) -> int:
    reports = [MaeReport.load(p) for p in args.reports]
    keys = args.group_keys.split(",") if args.group_keys else None
    rows = condition_table(reports, group_keys=keys)
    write_table_csv(rows, args.out)
    print(f"{len(rows)} condition rows written to {args.out}")
    return 0


def _cmd_run(args) -> int:
    config = PipelineConfig.from_dict(read_json(args.config))
    result = run_pipeline(config)
    print(
        f"run complete: MAE {result.report.mae_percent:.3f} percent "
        f"({result.report.n_voxels} voxels) in {result.run_dir}"
    )
    return 0


def _cmd_benchmark(args) -> int:
    if args.config:
        payload = read_json(args.config)
        if args.out_dir:
            payload["out_dir"] = args.out_dir
        config = BenchmarkConfig.from_dict(payload)
    else:
        if not args.out_dir:
            raise ConfigError("benchmark needs --config or --out-dir")
        config = BenchmarkConfig(out_dir=args.out_dir)
    rows, _ = full_benchmark(config)
    for row in rows:
        print(
            f"motion={row['motion']:3s} method={row['method']:10s} "
            f"b1={row['b1_mode']:12s} mae={row['mean_mae_percent']:6.2f} "
            f"+- {row['sd_mae_percent']:.2f} (n={row['n_repeats']})"
        )
    print(f"table written to {Path(config.out_dir) / 'table.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vfa-motion",
        description="Inter-scan motion correction for variable flip angle R1 mapping.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic multi-position dataset")
    p.add_argument("--config", help="simulation config JSON (defaults used if omitted)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("reslice", help="rigidly resample a volume onto a target grid")
    p.add_argument("--input", required=True)
    p.add_argument("--transform", required=True, help="transform JSON (or dataset transforms.json)")
    p.add_argument("--position", type=int, default=None, help="index into a transforms file")
    p.add_argument("--inverse", action="store_true", help="apply the inverse transform")
    p.add_argument("--target", required=True, help="volume whose grid is the target")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reslice)

    p = sub.add_parser("ratio-sens", help="relative sensitivity by smoothed image ratio")
    p.add_argument("--moving", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--fwhm", type=float, default=12.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ratio_sens)

    p = sub.add_parser("fit-sens", help="relative sensitivity by generative model fit")
    p.add_argument("--images", nargs="+", required=True, help="array-coil calibration images")
    p.add_argument("--body", nargs="*", default=[], help="body-coil calibration images")
    p.add_argument("--lambda-array", type=float, default=1e3)
    p.add_argument("--lambda-body", type=float, default=1e8)
    p.add_argument("--iters", type=int, default=15)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_fit_sens)

    p = sub.add_parser("compute-r1", help="two-point VFA R1 map")
    p.add_argument("--pdw", required=True)
    p.add_argument("--t1w", required=True)
    p.add_argument("--delta", default=None, help="relative sensitivity of PDw vs T1w")
    p.add_argument("--b1-pdw", default=None)
    p.add_argument("--b1-t1w", default=None, help="per-contrast transmit map (default shared)")
    p.add_argument("--clamp", action="store_true", help="clamp output to [0, 10] 1/s")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_compute_r1)

    p = sub.add_parser("evaluate", help="masked MAE of a map against a reference")
    p.add_argument("--estimate", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--labels", default=None, help="condition labels, key=value,key=value")
    p.add_argument("--out", required=True)
    p.add_argument("--error-out", default=None, help="write the per-voxel error volume")
    p.add_argument("--histogram", default=None, help="write per-region histograms CSV")
    p.add_argument("--labels-volume", default=None, help="region labels volume for --histogram")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("tabulate", help="aggregate MAE reports into a condition table")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--group-keys", default=None, help="comma-separated label keys")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_tabulate)

    p = sub.add_parser("run", help="full pipeline from a run config JSON")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("benchmark", help="condition grid with repeats and table")
    p.add_argument("--config", default=None, help="benchmark config JSON")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_benchmark)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (GeometryError, ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 2
    except (SolverError, FitError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
