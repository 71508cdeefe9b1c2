"""Synthetic multi-position VFA datasets with known ground truth.

A digital phantom (nested ellipsoids or a 3D Shepp-Logan variant) supplies
r1 and proton-density maps. For each head position the anatomy is sampled
analytically at rigidly transformed coordinates, modulated by a
position-specific smooth receive-sensitivity field fixed in scanner space,
excited through a position-specific transmit-efficiency field, and imaged
with the steady-state signal model at the acquisition's flip angle and TR.
Calibration images use a coarser grid and their own rapid low-flip
protocol. Gaussian noise is added at a configured SNR from a seeded
generator, so a dataset is a pure function of its config and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
import numpy as np

from .config import (
    config_hash,
    read_json,
    reject_unknown_keys,
    require_keys,
    sha256_file,
    write_json,
)
from .errors import ConfigError
from .ratio import CalibrationImage
from .signal import B1Map, TissueParams, VfaAcquisition, spgr_signal
from .volume import (
    Grid,
    RigidTransform,
    Volume,
    coarsen_grid,
    load_sidecar,
    load_volume,
    reslice,
    save_volume,
)

__all__ = [
    "PhantomSpec",
    "SensitivitySpec",
    "MotionScript",
    "Protocol",
    "SimDataset",
    "default_simulation_config",
    "generate",
    "generate_from_config",
    "load_dataset",
    "motion_summary",
]

_LAYOUTS = ("nested-ellipsoids", "shepp-logan-3d")
_POLY_KEYS = ("const", "x", "y", "z", "xx", "yy", "zz", "xy", "xz", "yz")
_EULER_CONVENTION = "intrinsic-zyx"

# (name, centre fractions of half-FOV, semi-axis fractions, z-rotation deg)
# the outermost shell plays the scalp: it keeps evaluated tissue away from
# the air boundary and is excluded from evaluation masks
_NESTED_ELLIPSOIDS = (
    ("scalp", (0.0, 0.0, 0.0), (0.80, 0.88, 0.84), 0.0),
    ("csf", (0.0, 0.0, 0.0), (0.68, 0.78, 0.73), 0.0),
    ("gm", (0.0, 0.0, 0.0), (0.58, 0.67, 0.62), 0.0),
    ("wm", (0.0, 0.02, -0.02), (0.42, 0.50, 0.45), 0.0),
    ("ventricle", (0.0, 0.06, 0.03), (0.13, 0.18, 0.15), 0.0),
)
_NESTED_DEFAULT_REGIONS = {
    "scalp": {"r1": 0.45, "pd": 60.0},
    "csf": {"r1": 0.5, "pd": 100.0},
    "gm": {"r1": 0.8, "pd": 85.0},
    "wm": {"r1": 1.25, "pd": 70.0},
    "ventricle": {"r1": 0.5, "pd": 100.0},
}
_NESTED_MASK_REGIONS = ("csf", "gm", "wm", "ventricle")

# Reduced 3D Shepp-Logan-style head: outer shell, brain, two lateral
# inclusions, one deep inclusion. Fractions of half-FOV.
_SHEPP_ELLIPSOIDS = (
    ("shell", (0.0, 0.0, 0.0), (0.69, 0.92, 0.81), 0.0),
    ("brain", (0.0, -0.0184, 0.0), (0.6624, 0.874, 0.78), 0.0),
    ("right-cavity", (0.22, 0.0, 0.0), (0.11, 0.31, 0.22), -18.0),
    ("left-cavity", (-0.22, 0.0, 0.0), (0.16, 0.41, 0.28), 18.0),
    ("core", (0.0, 0.35, -0.15), (0.21, 0.25, 0.23), 0.0),
)
_SHEPP_DEFAULT_REGIONS = {
    "shell": {"r1": 0.6, "pd": 95.0},
    "brain": {"r1": 0.9, "pd": 80.0},
    "right-cavity": {"r1": 0.5, "pd": 100.0},
    "left-cavity": {"r1": 0.5, "pd": 100.0},
    "core": {"r1": 1.4, "pd": 65.0},
}
_SHEPP_MASK_REGIONS = ("brain", "right-cavity", "left-cavity", "core")


def _poly_from_dict(d: dict) -> dict:
    reject_unknown_keys(d, _POLY_KEYS, "polynomial field")
    return {k: float(v) for k, v in d.items()}


def eval_poly(coeffs: dict, xn: np.ndarray, yn: np.ndarray, zn: np.ndarray) -> np.ndarray:
    """Evaluate a degree-2 polynomial over normalized [-1, 1] coordinates."""
    out = np.full(xn.shape, coeffs.get("const", 0.0))
    out = out + coeffs.get("x", 0.0) * xn + coeffs.get("y", 0.0) * yn + coeffs.get("z", 0.0) * zn
    out = out + coeffs.get("xx", 0.0) * xn * xn + coeffs.get("yy", 0.0) * yn * yn
    out = out + coeffs.get("zz", 0.0) * zn * zn
    out = out + coeffs.get("xy", 0.0) * xn * yn + coeffs.get("xz", 0.0) * xn * zn
    out = out + coeffs.get("yz", 0.0) * yn * zn
    return out


@dataclass(frozen=True)
class PhantomSpec:
    """Digital phantom: grid shape, tissue layout and per-region r1/pd.

    Internal region transitions blend smoothly over ``edge_blend_mm``
    (tissue has partial-volume gradients, not steps); the outer air
    boundary stays sharp but lies in the excluded scalp region.
    """

    dims: tuple[int, int, int] = (64, 64, 64)
    voxel_size_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)
    layout: str = "nested-ellipsoids"
    regions: dict = dataclass_field(default_factory=dict)
    edge_blend_mm: float = 3.0

    def __post_init__(self):
        if self.layout not in _LAYOUTS:
            raise ConfigError(f"layout must be one of {_LAYOUTS}, got {self.layout!r}")
        if self.edge_blend_mm < 0:
            raise ConfigError("edge_blend_mm must be >= 0")
        defaults = (
            _NESTED_DEFAULT_REGIONS if self.layout == "nested-ellipsoids" else _SHEPP_DEFAULT_REGIONS
        )
        merged = {name: dict(vals) for name, vals in defaults.items()}
        reject_unknown_keys(self.regions, merged, "phantom regions")
        for name, vals in self.regions.items():
            reject_unknown_keys(vals, ("r1", "pd"), f"region {name!r}")
            merged[name].update({k: float(v) for k, v in vals.items()})
        for name, vals in merged.items():
            if not 0.2 <= vals["r1"] <= 2.5:
                raise ConfigError(f"region {name!r} r1 must lie in [0.2, 2.5]")
            if vals["pd"] <= 0:
                raise ConfigError(f"region {name!r} pd must be positive")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "voxel_size_mm", tuple(float(v) for v in self.voxel_size_mm))
        object.__setattr__(self, "regions", merged)

    def _ellipsoids(self):
        return _NESTED_ELLIPSOIDS if self.layout == "nested-ellipsoids" else _SHEPP_ELLIPSOIDS

    def mask_label_indices(self) -> tuple[int, ...]:
        """1-based label indices of the regions entering evaluation masks."""
        mask_names = (
            _NESTED_MASK_REGIONS if self.layout == "nested-ellipsoids" else _SHEPP_MASK_REGIONS
        )
        return tuple(
            i for i, (name, *_) in enumerate(self._ellipsoids(), start=1) if name in mask_names
        )

    def reference_grid(self) -> Grid:
        """Scanner-frame grid with the phantom centred on the origin."""
        dims = np.asarray(self.dims, dtype=float)
        voxel = np.asarray(self.voxel_size_mm, dtype=float)
        affine = np.eye(4)
        affine[:3, :3] = np.diag(voxel)
        affine[:3, 3] = -(dims - 1.0) / 2.0 * voxel
        return Grid(self.dims, voxel, affine)

    def half_fov_mm(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=float) * np.asarray(self.voxel_size_mm) / 2.0

    def _normalized_radius(self, points_mm: np.ndarray, centre_f, semi_f, angle_deg):
        half = self.half_fov_mm()
        centre = np.asarray(centre_f) * half
        semi = np.asarray(semi_f) * half
        p = points_mm - centre
        if angle_deg:
            a = math.radians(angle_deg)
            rot = np.array(
                [[math.cos(a), math.sin(a), 0.0], [-math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]]
            )
            p = p @ rot.T
        q = p / semi
        return np.sqrt((q * q).sum(axis=-1)), float(np.cbrt(np.prod(semi)))

    def labels_at(self, points_mm: np.ndarray) -> np.ndarray:
        """Region index (0 = background) at world points, painted in order."""
        labels = np.zeros(points_mm.shape[:-1], dtype=np.int64)
        for index, (name, centre_f, semi_f, angle_deg) in enumerate(self._ellipsoids(), start=1):
            radius, _ = self._normalized_radius(points_mm, centre_f, semi_f, angle_deg)
            labels[radius <= 1.0] = index
        return labels

    def maps_at(self, points_mm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(r1, pd, labels) at world points; NaN outside the phantom.

        The outermost region is painted hard; inner regions ramp from the
        underlying value to their plateau over ``edge_blend_mm`` inside
        their boundary (cubic smoothstep), so the maps are identical smooth
        functions in every acquisition space.
        """
        labels = self.labels_at(points_mm)
        r1 = np.full(points_mm.shape[:-1], np.nan)
        pd = np.full(points_mm.shape[:-1], np.nan)
        for index, (name, centre_f, semi_f, angle_deg) in enumerate(self._ellipsoids()):
            radius, semi_scale = self._normalized_radius(points_mm, centre_f, semi_f, angle_deg)
            vals = self.regions[name]
            if index == 0 or self.edge_blend_mm == 0:
                inside = radius <= 1.0
                r1[inside] = vals["r1"]
                pd[inside] = vals["pd"]
                continue
            t = np.clip((1.0 - radius) * semi_scale / self.edge_blend_mm, 0.0, 1.0)
            w = t * t * (3.0 - 2.0 * t)
            blend = w > 0.0
            r1[blend] = (1.0 - w[blend]) * r1[blend] + w[blend] * vals["r1"]
            pd[blend] = (1.0 - w[blend]) * pd[blend] + w[blend] * vals["pd"]
        return r1, pd, labels

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "voxel_size_mm": list(self.voxel_size_mm),
            "layout": self.layout,
            "regions": {k: dict(v) for k, v in self.regions.items()},
            "edge_blend_mm": self.edge_blend_mm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        reject_unknown_keys(
            d, ("dims", "voxel_size_mm", "layout", "regions", "edge_blend_mm"), "phantom"
        )
        return cls(
            dims=tuple(d.get("dims", (64, 64, 64))),
            voxel_size_mm=tuple(d.get("voxel_size_mm", (2.0, 2.0, 2.0))),
            layout=d.get("layout", "nested-ellipsoids"),
            regions=d.get("regions", {}),
            edge_blend_mm=float(d.get("edge_blend_mm", 3.0)),
        )


@dataclass(frozen=True)
class SensitivitySpec:
    """Per-position log receive-sensitivity fields (degree-2 polynomials)."""

    log_coeffs: tuple[dict, ...] = (
        {"x": 0.15, "xx": 0.05, "y": 0.05},
        {"x": -0.15, "yy": 0.04, "y": -0.05},
    )

    def __post_init__(self):
        coeffs = tuple(_poly_from_dict(c) for c in self.log_coeffs)
        if not coeffs:
            raise ConfigError("sensitivity spec needs at least one position")
        object.__setattr__(self, "log_coeffs", coeffs)

    def field_at(self, k: int, xn, yn, zn) -> np.ndarray:
        """Receive sensitivity (exponentiated log polynomial) at position k."""
        return np.exp(eval_poly(self.log_coeffs[k], xn, yn, zn))

    def to_dict(self) -> dict:
        return {"log_coeffs": [dict(c) for c in self.log_coeffs]}

    @classmethod
    def from_dict(cls, d: dict) -> "SensitivitySpec":
        reject_unknown_keys(d, ("log_coeffs",), "sensitivity")
        return cls(log_coeffs=tuple(d["log_coeffs"]))


_DEFAULT_TRANSMIT = {"const": 1.05, "xx": -0.08, "yy": -0.08, "zz": -0.05}


@dataclass(frozen=True)
class MotionScript:
    """Per-position pose, noise level and transmit-field specification."""

    transforms: tuple[RigidTransform, ...] = (RigidTransform.identity(), RigidTransform.identity())
    snr: float | None = 50.0
    calib_snr: float | None = None
    transmit: tuple[dict, ...] | None = None

    def __post_init__(self):
        transforms = tuple(self.transforms)
        if not transforms:
            raise ConfigError("motion script needs at least one position")
        if self.snr is not None and not self.snr > 0:
            raise ConfigError(f"snr must be positive or null, got {self.snr}")
        if self.calib_snr is not None and not self.calib_snr > 0:
            raise ConfigError(f"calib_snr must be positive or null, got {self.calib_snr}")
        transmit = self.transmit
        if transmit is None:
            transmit = tuple(dict(_DEFAULT_TRANSMIT) for _ in transforms)
        transmit = tuple(_poly_from_dict(c) for c in transmit)
        if len(transmit) != len(transforms):
            raise ConfigError("transmit spec must have one entry per position")
        object.__setattr__(self, "transforms", transforms)
        object.__setattr__(self, "transmit", transmit)

    @property
    def n_positions(self) -> int:
        return len(self.transforms)

    def effective_calib_snr(self) -> float | None:
        return self.snr if self.calib_snr is None else self.calib_snr

    def transmit_at(self, k: int, xn, yn, zn) -> np.ndarray:
        return eval_poly(self.transmit[k], xn, yn, zn)

    def to_dict(self) -> dict:
        return {
            "transforms": [t.to_dict() for t in self.transforms],
            "snr": self.snr,
            "calib_snr": self.calib_snr,
            "transmit": [dict(c) for c in self.transmit],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MotionScript":
        reject_unknown_keys(d, ("transforms", "snr", "calib_snr", "transmit"), "motion")
        require_keys(d, ("transforms",), "motion")
        transforms = tuple(_transform_from_dict(t) for t in d["transforms"])
        transmit = d.get("transmit")
        return cls(
            transforms=transforms,
            snr=d.get("snr", 50.0),
            calib_snr=d.get("calib_snr"),
            transmit=tuple(transmit) if transmit is not None else None,
        )


def _transform_from_dict(d: dict) -> RigidTransform:
    reject_unknown_keys(
        d, ("rotation", "translation_mm", "euler_zyx_deg"), "transform"
    )
    if "euler_zyx_deg" in d:
        return RigidTransform.from_euler_deg(
            d["euler_zyx_deg"], d.get("translation_mm", (0.0, 0.0, 0.0))
        )
    require_keys(d, ("rotation",), "transform")
    return RigidTransform.from_dict(
        {"rotation": d["rotation"], "translation_mm": d.get("translation_mm", (0.0, 0.0, 0.0))}
    )


@dataclass(frozen=True)
class Protocol:
    """Acquisition parameters for the VFA volumes and calibration images."""

    flip_angles_deg: tuple[float, ...] = (6.0, 26.0)
    tr_s: float = 0.0195
    calib_flip_deg: float = 6.0
    calib_tr_s: float = 0.0065
    calib_res_factor: int = 4

    def __post_init__(self):
        if not all(0.0 < a < 90.0 for a in self.flip_angles_deg):
            raise ConfigError("flip angles must lie in (0, 90) degrees")
        if not (self.tr_s > 0 and self.calib_tr_s > 0):
            raise ConfigError("repetition times must be positive")
        if self.calib_res_factor < 1:
            raise ConfigError("calib_res_factor must be >= 1")
        object.__setattr__(self, "flip_angles_deg", tuple(float(a) for a in self.flip_angles_deg))

    def to_dict(self) -> dict:
        return {
            "flip_angles_deg": list(self.flip_angles_deg),
            "tr_s": self.tr_s,
            "calib_flip_deg": self.calib_flip_deg,
            "calib_tr_s": self.calib_tr_s,
            "calib_res_factor": self.calib_res_factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Protocol":
        reject_unknown_keys(
            d,
            ("flip_angles_deg", "tr_s", "calib_flip_deg", "calib_tr_s", "calib_res_factor"),
            "protocol",
        )
        out = dict(d)
        if "flip_angles_deg" in out:
            out["flip_angles_deg"] = tuple(out["flip_angles_deg"])
        return cls(**out)


def default_simulation_config() -> dict:
    """Config for the default two-position dataset (one moved position)."""
    return {
        "schema_version": 1,
        "seed": 42,
        "phantom": PhantomSpec().to_dict(),
        "sensitivity": SensitivitySpec().to_dict(),
        "motion": MotionScript(
            transforms=(
                RigidTransform.identity(),
                RigidTransform.from_euler_deg((2.0, -1.5, 1.0), (2.5, -2.0, 1.5)),
            )
        ).to_dict(),
        "protocol": Protocol().to_dict(),
    }


def motion_summary(motion: MotionScript) -> dict:
    """Net (RMS across axes) translation and rotation per position."""
    per_position = []
    for t in motion.transforms:
        trans = float(np.sqrt(np.mean(t.translation_mm**2)))
        angles = t.euler_zyx_deg()
        rot = float(np.sqrt(np.mean(angles**2)))
        per_position.append(
            {"net_translation_mm": trans, "net_rotation_deg": rot}
        )
    return {
        "per_position": per_position,
        "max_net_translation_mm": max(p["net_translation_mm"] for p in per_position),
        "max_net_rotation_deg": max(p["net_rotation_deg"] for p in per_position),
        "euler_convention": _EULER_CONVENTION,
    }


def _normalized_coords(points: np.ndarray, half_fov: np.ndarray):
    return (
        points[..., 0] / half_fov[0],
        points[..., 1] / half_fov[1],
        points[..., 2] / half_fov[2],
    )


def _acquired_image(clean: np.ndarray, snr: float | None, rng: np.random.Generator) -> np.ndarray:
    """Turn a clean signal (NaN outside tissue) into a measured magnitude.

    Air gives zero signal, not a missing sample, so the background is
    filled with zeros before noise. Magnitude detection keeps intensities
    non-negative; at tissue SNRs the absolute value is a no-op there.
    """
    finite = np.isfinite(clean)
    filled = np.where(finite, clean, 0.0)
    if snr is None:
        return filled
    sigma = float(np.abs(clean[finite]).mean()) / snr
    return np.abs(filled + sigma * rng.standard_normal(clean.shape))


def generate(
    phantom: PhantomSpec,
    sens: SensitivitySpec,
    motion: MotionScript,
    protocol: Protocol,
    out_dir,
    seed: int = 0,
) -> Path:
    """Write a complete dataset directory and return its path.

    Per position k (1-based in filenames): a calibration image on the
    coarse grid, a VFA volume, a transmit-efficiency map, plus truth files
    (r1, pd, per-position sensitivity in reference space, evaluation mask,
    rigid transforms) and a manifest embedding the full config and the
    sha256 of every written file.
    """
    n_pos = motion.n_positions
    if len(sens.log_coeffs) != n_pos:
        raise ConfigError(
            f"sensitivity spec has {len(sens.log_coeffs)} positions, motion has {n_pos}"
        )
    if len(protocol.flip_angles_deg) != n_pos:
        raise ConfigError(
            f"protocol has {len(protocol.flip_angles_deg)} flip angles, motion has {n_pos}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    ref_grid = phantom.reference_grid()
    calib_grid = coarsen_grid(ref_grid, protocol.calib_res_factor)
    half = phantom.half_fov_mm()
    ref_pts = ref_grid.world_coordinates()
    calib_pts = calib_grid.world_coordinates()

    files: list[Path] = []

    def save(vol, rel, intent, meta=None):
        path = save_volume(vol, out_dir / rel, intent=intent, meta=meta)
        files.append(path.with_suffix(".raw"))
        files.append(path)

    # ground truth in reference space
    r1_ref, pd_ref, labels_ref = phantom.maps_at(ref_pts)
    save(Volume(r1_ref, ref_grid), "truth/r1", "r1_map")
    save(Volume(pd_ref, ref_grid), "truth/pd", "pd_map")
    save(Volume(labels_ref.astype(float), ref_grid), "truth/labels", "labels")

    mask_indices = phantom.mask_label_indices()
    occupancy_ok = np.isin(labels_ref, mask_indices)
    labels_meta = {
        "regions": {name: i + 1 for i, (name, *_) in enumerate(phantom._ellipsoids())},
        "mask_regions": list(mask_indices),
    }

    for k in range(n_pos):
        t_k = motion.transforms[k]
        inv_k = t_k.inverse()

        # anatomy seen at acquired voxels: phantom sampled at T^-1(world)
        anat_pts = inv_k.apply(ref_pts.reshape(-1, 3)).reshape(ref_pts.shape)
        r1_acq, pd_acq, labels_acq = phantom.maps_at(anat_pts)
        tissue = TissueParams(Volume(r1_acq, ref_grid), Volume(pd_acq, ref_grid))

        # coil fields are fixed in scanner space, evaluated on the acquired grid
        xn, yn, zn = _normalized_coords(ref_pts, half)
        sens_acq = Volume(sens.field_at(k, xn, yn, zn), ref_grid)
        ft_acq = Volume(motion.transmit_at(k, xn, yn, zn), ref_grid)
        b1 = B1Map(ft_acq)

        vfa_clean = spgr_signal(tissue, sens_acq, b1, protocol.flip_angles_deg[k], protocol.tr_s)
        vfa_noisy = _acquired_image(vfa_clean.data, motion.snr, rng)
        label = "PDw" if k == 0 else "T1w"
        save(
            Volume(vfa_noisy, ref_grid),
            f"vfa_{k + 1}",
            "vfa",
            meta={
                "acquisition": {
                    "flip_angle_deg": protocol.flip_angles_deg[k],
                    "tr_s": protocol.tr_s,
                    "label": label,
                }
            },
        )

        # calibration image: coarse grid, rapid low-flip protocol
        anat_c = inv_k.apply(calib_pts.reshape(-1, 3)).reshape(calib_pts.shape)
        r1_c, pd_c, _ = phantom.maps_at(anat_c)
        tissue_c = TissueParams(Volume(r1_c, calib_grid), Volume(pd_c, calib_grid))
        xcn, ycn, zcn = _normalized_coords(calib_pts, half)
        sens_c = Volume(sens.field_at(k, xcn, ycn, zcn), calib_grid)
        ft_c = B1Map(Volume(motion.transmit_at(k, xcn, ycn, zcn), calib_grid))
        calib_clean = spgr_signal(tissue_c, sens_c, ft_c, protocol.calib_flip_deg, protocol.calib_tr_s)
        calib_noisy = _acquired_image(calib_clean.data, motion.effective_calib_snr(), rng)
        save(
            Volume(calib_noisy, calib_grid),
            f"calib_{k + 1}",
            "calibration",
            meta={"calibration": {"coil": "array", "position_index": k}},
        )

        save(ft_acq, f"b1_{k + 1}", "b1_map")

        # truth sensitivity in reference space: field at the acquired position
        moved = t_k.apply(ref_pts.reshape(-1, 3)).reshape(ref_pts.shape)
        xmn, ymn, zmn = _normalized_coords(moved, half)
        save(Volume(sens.field_at(k, xmn, ymn, zmn), ref_grid), f"truth/sens_{k + 1}", "sensitivity")

        # evaluation mask: evaluated tissue with >= 50 percent occupancy
        # after the reslice each position's data will go through
        indicator = Volume(np.isin(labels_acq, mask_indices).astype(float), ref_grid)
        occ = reslice(indicator, t_k, ref_grid)
        occupancy_ok = occupancy_ok & np.isfinite(occ.data) & (occ.data >= 0.5)

    save(Volume(occupancy_ok.astype(float), ref_grid), "truth/mask", "mask")

    transforms_payload = {
        "convention": {
            "direction": "reference-world to acquired-world",
            "euler": _EULER_CONVENTION,
        },
        "positions": [t.to_dict() for t in motion.transforms],
        "summary": motion_summary(motion),
    }
    files.append(write_json(transforms_payload, out_dir / "truth/transforms.json"))

    config = {
        "schema_version": 1,
        "seed": seed,
        "phantom": phantom.to_dict(),
        "sensitivity": sens.to_dict(),
        "motion": motion.to_dict(),
        "protocol": protocol.to_dict(),
    }
    manifest = {
        "kind": "vfa-motion-dataset",
        "config": config,
        "config_sha256": config_hash(config),
        "n_positions": n_pos,
        "labels": labels_meta,
        "files": {
            str(p.relative_to(out_dir)): sha256_file(p) for p in sorted(files)
        },
    }
    write_json(manifest, out_dir / "manifest.json")
    return out_dir


def generate_from_config(config: dict, out_dir, seed: int | None = None) -> Path:
    """Build specs from a config mapping (see ``default_simulation_config``)."""
    reject_unknown_keys(
        config,
        ("schema_version", "seed", "phantom", "sensitivity", "motion", "protocol"),
        "simulation config",
    )
    if config.get("schema_version", 1) != 1:
        raise ConfigError(f"unsupported schema_version {config.get('schema_version')}")
    phantom = PhantomSpec.from_dict(config.get("phantom", {}))
    sens = SensitivitySpec.from_dict(config.get("sensitivity", SensitivitySpec().to_dict()))
    motion = MotionScript.from_dict(config.get("motion", MotionScript().to_dict()))
    protocol = Protocol.from_dict(config.get("protocol", {}))
    if seed is None:
        seed = int(config.get("seed", 0))
    return generate(phantom, sens, motion, protocol, out_dir, seed=seed)


@dataclass(eq=False)
class SimDataset:
    """Loaded view of a dataset directory."""

    path: Path
    manifest: dict

    @property
    def n_positions(self) -> int:
        return int(self.manifest["n_positions"])

    @property
    def config(self) -> dict:
        return self.manifest["config"]

    @property
    def calib_res_factor(self) -> int:
        return int(self.config["protocol"]["calib_res_factor"])

    def transform(self, k: int) -> RigidTransform:
        payload = read_json(self.path / "truth/transforms.json")
        return RigidTransform.from_dict(payload["positions"][k])

    def vfa(self, k: int) -> VfaAcquisition:
        path = self.path / f"vfa_{k + 1}"
        meta = load_sidecar(path)["acquisition"]
        return VfaAcquisition(
            load_volume(path),
            flip_angle_deg=float(meta["flip_angle_deg"]),
            tr_s=float(meta["tr_s"]),
            label=str(meta.get("label", "")),
        )

    def calib(self, k: int) -> CalibrationImage:
        path = self.path / f"calib_{k + 1}"
        meta = load_sidecar(path).get("calibration", {})
        return CalibrationImage(
            load_volume(path),
            coil=meta.get("coil", "array"),
            position_index=int(meta.get("position_index", k)),
        )

    def b1(self, k: int) -> B1Map:
        return B1Map(load_volume(self.path / f"b1_{k + 1}"))

    def truth_r1(self) -> Volume:
        return load_volume(self.path / "truth/r1")

    def truth_pd(self) -> Volume:
        return load_volume(self.path / "truth/pd")

    def truth_mask(self) -> Volume:
        return load_volume(self.path / "truth/mask")

    def truth_sensitivity(self, k: int) -> Volume:
        return load_volume(self.path / f"truth/sens_{k + 1}")

    def truth_labels(self) -> Volume:
        return load_volume(self.path / "truth/labels")


def load_dataset(path) -> SimDataset:
    path = Path(path)
    manifest = read_json(path / "manifest.json")
    if manifest.get("kind") != "vfa-motion-dataset":
        raise ConfigError(f"{path} does not contain a dataset manifest")
    return SimDataset(path, manifest)
