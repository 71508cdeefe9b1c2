"""Spoiled gradient-echo signal models and small-flip-angle R1 estimation.

All maps are pure voxel-wise functions: NaN in, NaN out. Flip angles are
nominal degrees at every interface and converted to radians exactly once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume import Volume, check_same_grid, load_sidecar, load_volume, save_volume

__all__ = [
    "VfaAcquisition",
    "B1Map",
    "TissueParams",
    "spgr_signal",
    "spgr_signal_smallfa",
    "r1_vfa",
    "apply_relative_sensitivity",
    "load_acquisition",
    "save_acquisition",
]

# relative threshold under which the estimator denominator counts as singular
_DENOM_GUARD = 1e-9


def _check_nonnegative_or_nan(data: np.ndarray, name: str) -> None:
    finite = data[np.isfinite(data)]
    if finite.size and finite.min() < 0:
        raise ValueError(f"{name} must be >= 0 or NaN (min {finite.min():g})")


@dataclass(frozen=True, eq=False)
class VfaAcquisition:
    """One weighted spoiled-GRE contrast: image plus nominal flip angle and TR."""

    image: Volume
    flip_angle_deg: float
    tr_s: float
    label: str = ""

    def __post_init__(self):
        if not 0.0 < self.flip_angle_deg < 90.0:
            raise ValueError(f"flip angle must be in (0, 90) deg, got {self.flip_angle_deg}")
        if not self.tr_s > 0:
            raise ValueError(f"tr_s must be positive, got {self.tr_s}")
        _check_nonnegative_or_nan(self.image.data, "acquisition intensities")

    @property
    def grid(self):
        return self.image.grid


@dataclass(frozen=True, eq=False)
class B1Map:
    """Relative transmit efficiency map; 1.0 means nominal flip angle."""

    ft: Volume

    def __post_init__(self):
        finite = self.ft.data[np.isfinite(self.ft.data)]
        if finite.size and (finite.min() <= 0 or finite.max() >= 3):
            raise ValueError("transmit efficiency must lie in (0, 3) or be NaN")

    @property
    def grid(self):
        return self.ft.grid


@dataclass(frozen=True, eq=False)
class TissueParams:
    """Ground-truth tissue maps: longitudinal rate r1 (1/s) and proton density."""

    r1: Volume
    pd: Volume

    def __post_init__(self):
        check_same_grid(self.r1, self.pd)
        finite = self.r1.data[np.isfinite(self.r1.data)]
        if finite.size and (finite.min() < 0 or finite.max() > 20):
            raise ValueError("r1 must lie in [0, 20] 1/s or be NaN")
        _check_nonnegative_or_nan(self.pd.data, "proton density")

    @property
    def grid(self):
        return self.r1.grid


def _ft_data(ft: B1Map | None, grid) -> np.ndarray | float:
    if ft is None:
        return 1.0
    check_same_grid(ft.ft.grid, grid)
    return ft.ft.data


def _sens_data(sens: Volume | None, grid) -> np.ndarray | float:
    if sens is None:
        return 1.0
    check_same_grid(sens, grid)
    return sens.data


def spgr_signal(
    tissue: TissueParams,
    sens: Volume | None,
    ft: B1Map | None,
    alpha_deg: float,
    tr_s: float,
) -> Volume:
    """Steady-state spoiled-GRE intensity.

    I = s * pd * sin(ft * a) * (1 - E) / (1 - cos(ft * a) * E) with
    E = exp(-TR * r1) and a the nominal flip angle in radians. ``sens`` and
    ``ft`` default to 1 when None.
    """
    if not 0.0 < alpha_deg < 90.0 + 1e-12:
        raise ValueError(f"alpha_deg must be in (0, 90], got {alpha_deg}")
    grid = tissue.grid
    s = _sens_data(sens, grid)
    f = _ft_data(ft, grid)
    a = f * math.radians(alpha_deg)
    with np.errstate(invalid="ignore"):
        e = np.exp(-tr_s * tissue.r1.data)
        out = s * tissue.pd.data * np.sin(a) * (1.0 - e) / (1.0 - np.cos(a) * e)
    return Volume(out, grid)


def spgr_signal_smallfa(
    tissue: TissueParams,
    sens: Volume | None,
    ft: B1Map | None,
    alpha_deg: float,
    tr_s: float,
) -> Volume:
    """Rational small-flip-angle signal model.

    I = s * pd * u * (TR * r1) / (u^2 / 2 + TR * r1) with u = ft * a in
    radians. This is the model the two-point estimator inverts exactly, so it
    supports round-trip tests.
    """
    if not alpha_deg > 0:
        raise ValueError(f"alpha_deg must be positive, got {alpha_deg}")
    grid = tissue.grid
    s = _sens_data(sens, grid)
    u = _ft_data(ft, grid) * math.radians(alpha_deg)
    e = tr_s * tissue.r1.data
    with np.errstate(invalid="ignore", divide="ignore"):
        out = s * tissue.pd.data * u * e / (u * u / 2.0 + e)
    return Volume(out, grid)


def _corrected_pdw(i1: np.ndarray, delta: Volume | None, grid) -> np.ndarray:
    """Divide the first contrast by the relative sensitivity (s1/s2)."""
    if delta is None:
        return i1
    check_same_grid(delta, grid)
    d = delta.data
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(d > 0, i1 / d, np.nan)
    return out


def r1_vfa(
    pdw: VfaAcquisition,
    t1w: VfaAcquisition,
    delta: Volume | None = None,
    ft_pdw: B1Map | None = None,
    ft_t1w: B1Map | str = "shared",
    clamp: bool = False,
) -> Volume:
    """Two-point variable flip angle R1 map (1/s).

    ``delta`` is the relative receive sensitivity of the first contrast with
    respect to the second (s1/s2); the first image is divided by it so both
    contrasts carry a common modulation. With ``ft_t1w="shared"`` the first
    contrast's transmit map is treated as position independent and enters as
    a squared prefactor; passing a second :class:`B1Map` uses
    position-specific effective flip angles per contrast.

    Voxels with non-finite inputs, or where the estimator denominator falls
    below 1e-9 of its masked median magnitude, are NaN. ``clamp`` limits the
    output to [0, 10] 1/s for display; raw values are the default.
    """
    grid = check_same_grid(pdw.image, t1w.image)
    a1 = math.radians(pdw.flip_angle_deg)
    a2 = math.radians(t1w.flip_angle_deg)
    tr1, tr2 = pdw.tr_s, t1w.tr_s
    i1 = _corrected_pdw(pdw.image.data, delta, grid)
    i2 = t1w.image.data

    with np.errstate(invalid="ignore", divide="ignore"):
        if isinstance(ft_t1w, str):
            if ft_t1w != "shared":
                raise ValueError(f"ft_t1w must be a B1Map or 'shared', got {ft_t1w!r}")
            f = _ft_data(ft_pdw, grid)
            num = i2 * a2 / tr2 - i1 * a1 / tr1
            den = i1 / a1 - i2 / a2
            r1 = 0.5 * f * f * num / _guarded(den)
        else:
            u1 = _ft_data(ft_pdw, grid) * a1
            u2 = _ft_data(ft_t1w, grid) * a2
            num = i2 * u2 / tr2 - i1 * u1 / tr1
            den = i1 / u1 - i2 / u2
            r1 = 0.5 * num / _guarded(den)
        if clamp:
            r1 = np.clip(r1, 0.0, 10.0)
    return Volume(r1, grid)


def _guarded(den: np.ndarray) -> np.ndarray:
    """NaN out near-singular denominators (CSF, vessels, background)."""
    mag = np.abs(den)
    finite = mag[np.isfinite(mag)]
    if finite.size == 0:
        return den
    eps = _DENOM_GUARD * float(np.median(finite))
    return np.where(mag > eps, den, np.nan)


def apply_relative_sensitivity(acq: VfaAcquisition, delta: Volume) -> VfaAcquisition:
    """Divide an acquisition by its relative sensitivity, keeping metadata.

    Voxels where ``delta`` is non-positive while the image is finite become
    NaN.
    """
    grid = check_same_grid(acq.image, delta)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(delta.data > 0, acq.image.data / delta.data, np.nan)
    return VfaAcquisition(Volume(out, grid), acq.flip_angle_deg, acq.tr_s, acq.label)


def save_acquisition(acq: VfaAcquisition, path, intent: str = "vfa") -> None:
    meta = {
        "acquisition": {
            "flip_angle_deg": acq.flip_angle_deg,
            "tr_s": acq.tr_s,
            "label": acq.label,
        }
    }
    save_volume(acq.image, path, intent=intent, meta=meta)


def load_acquisition(path) -> VfaAcquisition:
    sidecar = load_sidecar(path)
    try:
        meta = sidecar["acquisition"]
    except KeyError:
        raise KeyError(f"{path}: sidecar has no 'acquisition' block") from None
    return VfaAcquisition(
        load_volume(path),
        flip_angle_deg=float(meta["flip_angle_deg"]),
        tr_s=float(meta["tr_s"]),
        label=str(meta.get("label", "")),
    )
