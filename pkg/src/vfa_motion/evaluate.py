"""Masked error metrics and condition tables for benchmark runs."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .volume import Volume, check_same_grid

__all__ = ["MaeReport", "mae", "reference_map", "condition_table", "write_table_csv"]

# canonical row ordering for known condition keys; unknown keys sort last,
# unknown values alphabetically
_CANONICAL_ORDER = {
    "motion": ["no", "yes"],
    "method": ["none", "ratio", "generative"],
    "b1_mode": ["shared", "per-contrast"],
}


@dataclass(eq=False)
class MaeReport:
    """Masked mean absolute percentage error of a map against a reference."""

    mae_percent: float
    n_voxels: int
    error_volume: Volume
    labels: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.mae_percent < 0:
            raise ValueError("mae_percent must be >= 0")
        if self.n_voxels <= 0:
            raise ValueError("n_voxels must be positive")

    def to_dict(self) -> dict:
        return {
            "mae_percent": self.mae_percent,
            "n_voxels": self.n_voxels,
            "labels": dict(self.labels),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "MaeReport":
        """Load the scalar summary; the error volume is archived separately."""
        d = json.loads(Path(path).read_text())
        placeholder = Volume(np.zeros((1, 1, 1)), _unit_grid())
        return cls(d["mae_percent"], d["n_voxels"], placeholder, dict(d["labels"]))


def _unit_grid():
    from .volume import Grid

    return Grid((1, 1, 1), np.ones(3), np.eye(4))


def mae(estimate: Volume, reference: Volume, mask: Volume, labels: dict | None = None) -> MaeReport:
    """Mean absolute error |ref - est| / ref over the mask, in percent.

    Only voxels inside the mask (values > 0.5) where both maps are finite
    enter the mean; the reported voxel count is the number actually used.
    The reference must be positive there.
    """
    grid = check_same_grid(estimate, reference, mask)
    with np.errstate(invalid="ignore"):
        valid = (
            (mask.data > 0.5)
            & np.isfinite(estimate.data)
            & np.isfinite(reference.data)
        )
    if not valid.any():
        raise ValueError("mask leaves no finite voxels to evaluate")
    if np.any(reference.data[valid] <= 0):
        raise ValueError("reference map must be positive inside the mask")
    err = np.full(grid.dims, np.nan)
    err[valid] = np.abs(reference.data[valid] - estimate.data[valid]) / reference.data[valid]
    value = 100.0 * float(err[valid].mean())
    return MaeReport(value, int(valid.sum()), Volume(err, grid), dict(labels or {}))


def reference_map(maps: Sequence[Volume]) -> Volume:
    """Voxel-wise mean over finite values; all-NaN voxels stay NaN."""
    if not maps:
        raise ValueError("reference_map needs at least one map")
    grid = check_same_grid(*maps)
    acc = np.zeros(grid.dims)
    cnt = np.zeros(grid.dims)
    for m in maps:
        finite = np.isfinite(m.data)
        acc += np.where(finite, m.data, 0.0)
        cnt += finite
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(cnt > 0, acc / cnt, np.nan)
    return Volume(out, grid)


def _sort_key(labels: tuple) -> tuple:
    key = []
    for name, value in labels:
        order = _CANONICAL_ORDER.get(name)
        if order is not None and value in order:
            key.append((0, order.index(value), ""))
        else:
            key.append((1, 0, str(value)))
    return tuple(key)


def condition_table(reports: Sequence[MaeReport], group_keys: Sequence[str] | None = None) -> list[dict]:
    """Mean and sample standard deviation of MAE grouped by condition labels.

    Groups with a single report get s.d. 0 and are flagged. Rows follow the
    canonical condition ordering (no-motion before motion, correction
    methods in none/ratio/generative order).
    """
    if not reports:
        raise ValueError("condition_table needs at least one report")
    if group_keys is None:
        group_keys = sorted({k for r in reports for k in r.labels}, key=lambda k: (
            list(_CANONICAL_ORDER).index(k) if k in _CANONICAL_ORDER else 99, k
        ))
    groups: dict[tuple, list[float]] = {}
    for r in reports:
        key = tuple((k, r.labels.get(k, "")) for k in group_keys)
        groups.setdefault(key, []).append(r.mae_percent)
    rows = []
    for key in sorted(groups, key=_sort_key):
        values = np.asarray(groups[key])
        single = values.size == 1
        rows.append(
            {
                **dict(key),
                "mean_mae_percent": float(values.mean()),
                "sd_mae_percent": 0.0 if single else float(values.std(ddof=1)),
                "n_repeats": int(values.size),
                "single_repeat": single,
            }
        )
    return rows


def tissue_histograms(
    values: Volume,
    labels: Volume,
    region_names: dict | None = None,
    n_bins: int = 64,
    value_range: tuple[float, float] | None = None,
) -> list[dict]:
    """Per-region histogram rows of a map (finite voxels only).

    ``labels`` holds integer region indices (0 = background, skipped).
    Returns one row per (region, bin) with bin edges and voxel counts.
    """
    check_same_grid(values, labels)
    lab = labels.data
    finite = np.isfinite(values.data) & (lab > 0.5)
    if not finite.any():
        raise ValueError("no finite voxels inside labelled regions")
    vals = values.data[finite]
    if value_range is None:
        value_range = (float(vals.min()), float(vals.max()))
    edges = np.linspace(value_range[0], value_range[1], n_bins + 1)
    rows = []
    names = {int(k): v for k, v in (region_names or {}).items()}
    for region in sorted(np.unique(lab[finite]).astype(int)):
        counts, _ = np.histogram(
            values.data[finite & (lab == region)], bins=edges
        )
        name = names.get(region, str(region))
        for b in range(n_bins):
            rows.append(
                {
                    "region": name,
                    "bin_lo": float(edges[b]),
                    "bin_hi": float(edges[b + 1]),
                    "count": int(counts[b]),
                }
            )
    return rows


def write_table_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise ValueError("no rows to write")
    fieldnames = list(rows[0].keys())
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path
