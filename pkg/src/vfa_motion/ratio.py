"""Smoothed-ratio estimation of relative receive sensitivity.

Two calibration images acquired at different head positions share the
anatomy but carry position-specific coil modulations; the voxel-wise ratio
of the (optionally smoothed) images cancels the anatomy and leaves the
relative sensitivity of one position with respect to the other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume, RigidTransform, check_same_grid, gaussian_smooth, reslice

__all__ = [
    "CalibrationImage",
    "ratio_relative_sensitivity",
    "upsample_delta",
    "DEFAULT_FWHM_MM",
]

# matches the default smoothing kernel used for calibration images
DEFAULT_FWHM_MM = 12.0

# fraction of the 99th-percentile smoothed reference under which the ratio
# is considered unsupported (air regions)
_FLOOR_FRACTION = 1e-6

_COILS = ("array", "body")


@dataclass(frozen=True, eq=False)
class CalibrationImage:
    """Rapid low-resolution coil-combined magnitude image for one position."""

    image: Volume
    coil: str = "array"
    position_index: int = 0

    def __post_init__(self):
        if self.coil not in _COILS:
            raise ValueError(f"coil must be one of {_COILS}, got {self.coil!r}")
        finite = self.image.data[np.isfinite(self.image.data)]
        if finite.size and finite.min() < 0:
            raise ValueError("calibration intensities must be >= 0 or NaN")

    @property
    def grid(self):
        return self.image.grid


def _calib_volume(img) -> Volume:
    return img.image if isinstance(img, CalibrationImage) else img


def ratio_relative_sensitivity(moving, reference, fwhm_mm: float = DEFAULT_FWHM_MM) -> Volume:
    """Relative sensitivity of ``moving`` with respect to ``reference``.

    Both images must already live on one grid. Each is smoothed with an
    isotropic Gaussian of ``fwhm_mm`` (0 disables smoothing) before the
    voxel-wise division, which combats noise amplification in low-SNR
    regions. Smoothing also extends the ratio a kernel radius past the
    observed region, so reslicing losses at the tissue edge do not punch
    holes in the correction. Voxels where the smoothed reference falls
    below 1e-6 of its 99th percentile are NaN.
    """
    if fwhm_mm < 0:
        raise ValueError(f"fwhm_mm must be >= 0, got {fwhm_mm}")
    mov = _calib_volume(moving)
    ref = _calib_volume(reference)
    check_same_grid(mov, ref)
    if fwhm_mm > 0:
        mov = gaussian_smooth(mov, fwhm_mm, fill_nan=True)
        ref = gaussian_smooth(ref, fwhm_mm, fill_nan=True)
    ref_data = ref.data
    finite_ref = ref_data[np.isfinite(ref_data)]
    if finite_ref.size == 0:
        raise ValueError("reference image has no finite voxels")
    floor = _FLOOR_FRACTION * float(np.percentile(finite_ref, 99))
    with np.errstate(invalid="ignore", divide="ignore"):
        delta = np.where(ref_data >= floor, mov.data / ref_data, np.nan)
    return mov.with_data(delta)


def upsample_delta(delta: Volume, target) -> Volume:
    """Reslice a relative-sensitivity map onto a finer grid (NaN propagated)."""
    return reslice(delta, RigidTransform.identity(), target)
