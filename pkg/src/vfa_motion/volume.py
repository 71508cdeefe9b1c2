"""Core 3D volume type: grid geometry, file I/O, rigid reslicing and smoothing.

Volumes are immutable after construction and every operation here is a pure
function, so concurrent use is safe. Data is held as 64-bit floats internally
regardless of file precision; NaN marks invalid voxels and is excluded from
all downstream sums and masks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import GeometryError, GridMismatchError

__all__ = [
    "Grid",
    "Volume",
    "RigidTransform",
    "as_grid",
    "check_same_grid",
    "reslice",
    "gaussian_smooth",
    "barycentre_grid",
    "coarsen_grid",
    "load_volume",
    "load_sidecar",
    "save_volume",
    "FWHM_TO_SIGMA",
]

# sigma = FWHM / sqrt(8 ln 2)
FWHM_TO_SIGMA = 1.0 / math.sqrt(8.0 * math.log(2.0))

_VOXEL_REL_TOL = 1e-6
_ORTHO_TOL = 1e-9
# mapped coordinates within this many voxels of a lattice point are snapped,
# so exact-identity reslicing stays bit-exact despite affine round-off
_SNAP_TOL = 1e-9


def _as_float_array(values, shape, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != shape:
        raise GeometryError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Grid:
    """Voxel lattice geometry: counts, spacing, and voxel-index -> world-mm map.

    ``affine`` maps homogeneous voxel indices (x, y, z, 1) to world
    coordinates in mm; its upper 3x3 column norms must equal
    ``voxel_size_mm``.
    """

    dims: tuple[int, int, int]
    voxel_size_mm: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or any(n < 1 for n in dims):
            raise GeometryError(f"dims must be three positive counts, got {self.dims}")
        voxel = _as_float_array(self.voxel_size_mm, (3,), "voxel_size_mm")
        if np.any(voxel <= 0):
            raise GeometryError(f"voxel_size_mm must be positive, got {voxel}")
        affine = _as_float_array(self.affine, (4, 4), "affine")
        if not np.allclose(affine[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise GeometryError("affine last row must be [0, 0, 0, 1]")
        if abs(np.linalg.det(affine[:3, :3])) <= 1e-12 * float(np.prod(voxel)):
            raise GeometryError("affine upper 3x3 is singular")
        col_norms = np.linalg.norm(affine[:3, :3], axis=0)
        if np.any(np.abs(col_norms - voxel) > _VOXEL_REL_TOL * voxel):
            raise GeometryError(
                f"voxel_size_mm {voxel} does not match affine column norms {col_norms}"
            )
        voxel.setflags(write=False)
        affine.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size_mm", voxel)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def from_affine(cls, dims, affine) -> "Grid":
        affine = _as_float_array(affine, (4, 4), "affine")
        voxel = np.linalg.norm(affine[:3, :3], axis=0)
        return cls(tuple(dims), voxel, affine)

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def voxel_to_world(self, idx: np.ndarray) -> np.ndarray:
        """Map voxel indices (..., 3) to world mm coordinates (..., 3)."""
        idx = np.asarray(idx, dtype=np.float64)
        return idx @ self.affine[:3, :3].T + self.affine[:3, 3]

    def world_to_voxel(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        inv = np.linalg.inv(self.affine[:3, :3])
        return (pts - self.affine[:3, 3]) @ inv.T

    def world_coordinates(self) -> np.ndarray:
        """World coordinates of every voxel center, shape dims + (3,)."""
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        idx = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
        return self.voxel_to_world(idx)

    def world_center(self) -> np.ndarray:
        half = (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0
        return self.voxel_to_world(half)

    def same_geometry(self, other: "Grid", tol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and bool(np.all(np.abs(self.affine - other.affine) <= tol * (1.0 + np.abs(self.affine))))
        )


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar image on a :class:`Grid`. Immutable; data is float64."""

    data: np.ndarray
    grid: Grid

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.grid.dims:
            raise GeometryError(
                f"data shape {data.shape} does not match grid dims {self.grid.dims}"
            )
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_affine(cls, data, affine) -> "Volume":
        data = np.asarray(data, dtype=np.float64)
        return cls(data, Grid.from_affine(data.shape, affine))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.grid.dims

    @property
    def voxel_size_mm(self) -> np.ndarray:
        return self.grid.voxel_size_mm

    @property
    def affine(self) -> np.ndarray:
        return self.grid.affine

    def with_data(self, data) -> "Volume":
        """New volume on the same grid."""
        return Volume(np.asarray(data, dtype=np.float64), self.grid)

    def finite_mask(self) -> np.ndarray:
        return np.isfinite(self.data)


def as_grid(obj) -> Grid:
    """Accept a Grid or anything carrying one (Volume, acquisition wrappers)."""
    if isinstance(obj, Grid):
        return obj
    if isinstance(obj, Volume):
        return obj.grid
    grid = getattr(obj, "grid", None)
    if isinstance(grid, Grid):
        return grid
    image = getattr(obj, "image", None)
    if isinstance(image, Volume):
        return image.grid
    raise GeometryError(f"cannot extract grid geometry from {type(obj).__name__}")


def check_same_grid(*objs) -> Grid:
    grids = [as_grid(o) for o in objs]
    first = grids[0]
    for g in grids[1:]:
        if not first.same_geometry(g):
            raise GridMismatchError(
                f"volumes are not on one grid: dims {first.dims} vs {g.dims}"
            )
    return first


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid world-space map: p -> rotation @ p + translation_mm."""

    rotation: np.ndarray
    translation_mm: np.ndarray

    def __post_init__(self):
        rot = _as_float_array(self.rotation, (3, 3), "rotation")
        trans = _as_float_array(self.translation_mm, (3,), "translation_mm")
        err = np.max(np.abs(rot.T @ rot - np.eye(3)))
        if err >= _ORTHO_TOL:
            raise GeometryError(f"rotation is not orthonormal (|R'R - I| = {err:.2e})")
        if np.linalg.det(rot) <= 0:
            raise GeometryError("rotation must be proper (det > 0)")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation_mm", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_euler_deg(cls, angles_zyx_deg, translation_mm=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Build from intrinsic z-y-x Euler angles in degrees."""
        rot = Rotation.from_euler("ZYX", angles_zyx_deg, degrees=True).as_matrix()
        return cls(rot, np.asarray(translation_mm, dtype=np.float64))

    def euler_zyx_deg(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_euler("ZYX", degrees=True)

    def inverse(self) -> "RigidTransform":
        rot_inv = self.rotation.T
        return RigidTransform(rot_inv, -rot_inv @ self.translation_mm)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation_mm + self.translation_mm,
        )

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation_mm

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation_mm": self.translation_mm.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.asarray(d["rotation"]), np.asarray(d["translation_mm"]))


def _trilinear(data: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of ``data`` at fractional voxel indices.

    ``idx`` has shape (..., 3). Points outside the voxel-center hull map to
    NaN. NaN voxels poison an output only when carrying nonzero weight, so
    lattice-aligned samples next to invalid regions stay exact.
    """
    shape = data.shape
    idx = np.where(np.abs(idx - np.round(idx)) < _SNAP_TOL, np.round(idx), idx)
    valid = np.ones(idx.shape[:-1], dtype=bool)
    base = np.empty(idx.shape[:-1] + (3,), dtype=np.int64)
    frac = np.empty_like(idx)
    for ax in range(3):
        n = shape[ax]
        c = idx[..., ax]
        valid &= (c >= 0.0) & (c <= n - 1)
        if n == 1:
            base[..., ax] = 0
            frac[..., ax] = 0.0
        else:
            f = np.clip(np.floor(c), 0, n - 2).astype(np.int64)
            base[..., ax] = f
            frac[..., ax] = c - f
    b0, b1, b2 = base[..., 0], base[..., 1], base[..., 2]
    d0, d1, d2 = frac[..., 0], frac[..., 1], frac[..., 2]
    out = np.zeros(idx.shape[:-1], dtype=np.float64)
    for off0 in (0, 1):
        w0 = d0 if off0 else 1.0 - d0
        i0 = np.minimum(b0 + off0, shape[0] - 1)
        for off1 in (0, 1):
            w01 = w0 * (d1 if off1 else 1.0 - d1)
            i1 = np.minimum(b1 + off1, shape[1] - 1)
            for off2 in (0, 1):
                w = w01 * (d2 if off2 else 1.0 - d2)
                i2 = np.minimum(b2 + off2, shape[2] - 1)
                corner = data[i0, i1, i2]
                out += np.where(w > 0.0, w * corner, 0.0)
    out[~valid] = np.nan
    return out


def reslice(src: Volume, transform: RigidTransform, target) -> Volume:
    """Resample ``src`` onto ``target`` geometry through a rigid transform.

    Each target voxel takes the trilinear interpolation of ``src`` at the
    transform-mapped world coordinate; voxels mapping outside ``src`` become
    NaN. ``transform`` maps target-world to source-world coordinates.
    """
    tgt = as_grid(target)
    world = tgt.world_coordinates()
    mapped = transform.apply(world.reshape(-1, 3))
    idx = src.grid.world_to_voxel(mapped).reshape(world.shape)
    return Volume(_trilinear(src.data, idx), tgt)


def _gauss_kernel_1d(sigma_vox: float) -> np.ndarray | None:
    """Discrete Gaussian taps truncated at +-4 sigma, unit sum."""
    radius = int(4.0 * sigma_vox + 1e-12)
    if radius < 1:
        return None
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return k / k.sum()


def gaussian_smooth(vol: Volume, fwhm_mm: float, fill_nan: bool = False) -> Volume:
    """Separable Gaussian smoothing with mirror boundaries.

    The kernel has sigma = fwhm / sqrt(8 ln 2) per axis in voxel units. NaN
    voxels are excluded from neighbouring sums via normalized convolution,
    so valid voxels near invalid regions are not eroded. By default NaN
    voxels stay NaN; with ``fill_nan`` they receive the normalized estimate
    wherever the kernel reaches finite support, extending smooth fields a
    kernel radius beyond their observed region.
    """
    if not fwhm_mm > 0:
        raise ValueError(f"fwhm_mm must be positive, got {fwhm_mm}")
    sigma_mm = fwhm_mm * FWHM_TO_SIGMA
    finite = np.isfinite(vol.data)
    filled = np.where(finite, vol.data, 0.0)
    if finite.all():
        weights = None
    else:
        weights = finite.astype(np.float64)
    for ax in range(3):
        kernel = _gauss_kernel_1d(sigma_mm / vol.voxel_size_mm[ax])
        if kernel is None:
            continue
        filled = ndimage.correlate1d(filled, kernel, axis=ax, mode="mirror")
        if weights is not None:
            weights = ndimage.correlate1d(weights, kernel, axis=ax, mode="mirror")
    if weights is None:
        out = np.where(finite, filled, np.nan)
    else:
        supported = finite if not fill_nan else (weights > 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(supported & (weights > 0.0), filled / weights, np.nan)
    return vol.with_data(out)


def _rigid_part(affine: np.ndarray) -> np.ndarray:
    """Rotation factor of the affine's upper 3x3 (polar decomposition)."""
    u, _, vt = np.linalg.svd(affine[:3, :3])
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u[:, -1] *= -1.0
        rot = u @ vt
    return rot


def barycentre_grid(volumes: Sequence) -> Grid:
    """Mean-space geometry for a set of aligned volumes.

    Rotation is the log-Euclidean mean of the affines' rigid parts, voxel
    size the component-wise mean, and the voxel counts cover the union
    bounding box of all input grids, centred on it.
    """
    if not volumes:
        raise ValueError("barycentre_grid needs at least one volume")
    grids = [as_grid(v) for v in volumes]
    rotvecs = [Rotation.from_matrix(_rigid_part(g.affine)).as_rotvec() for g in grids]
    mean_rot = Rotation.from_rotvec(np.mean(rotvecs, axis=0)).as_matrix()
    voxel = np.mean([g.voxel_size_mm for g in grids], axis=0)
    centre = np.mean([g.world_center() for g in grids], axis=0)

    corners = []
    for g in grids:
        nx, ny, nz = g.dims
        for i in (0, nx - 1):
            for j in (0, ny - 1):
                for k in (0, nz - 1):
                    corners.append(g.voxel_to_world([i, j, k]))
    local = (np.asarray(corners) - centre) @ mean_rot
    lo, hi = local.min(axis=0), local.max(axis=0)
    extent = hi - lo
    dims = tuple(int(max(1, math.ceil(e / v - 1e-9) + 1)) for e, v in zip(extent, voxel))
    box_centre_world = centre + mean_rot @ ((lo + hi) / 2.0)
    linear = mean_rot @ np.diag(voxel)
    translation = box_centre_world - linear @ ((np.asarray(dims) - 1.0) / 2.0)
    affine = np.eye(4)
    affine[:3, :3] = linear
    affine[:3, 3] = translation
    return Grid(dims, voxel, affine)


def coarsen_grid(grid: Grid, factor: int) -> Grid:
    """Geometry with ``factor`` times larger voxels covering the same field of view.

    Coarse voxel centres sit at the centres of factor^3 blocks of fine voxels.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return grid
    dims = tuple(max(1, n // factor) for n in grid.dims)
    scale = np.eye(4)
    scale[:3, :3] *= factor
    scale[:3, 3] = (factor - 1) / 2.0
    affine = grid.affine @ scale
    return Grid(dims, grid.voxel_size_mm * factor, affine)


# ---------------------------------------------------------------------------
# file format: <name>.raw (little-endian float32, x fastest) + <name>.json


def _pair_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".raw"), p.with_suffix(".json")


def save_volume(vol: Volume, path, intent: str = "image", meta: dict | None = None) -> Path:
    """Write ``<name>.raw`` + ``<name>.json``. Returns the json path."""
    raw_path, json_path = _pair_paths(path)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(vol.data.astype("<f4").ravel(order="F").tobytes())
    sidecar = {
        "dims": list(vol.dims),
        "voxel_size_mm": [float(v) for v in vol.voxel_size_mm],
        "affine": [[float(x) for x in row] for row in vol.affine],
        "intent": intent,
    }
    if meta:
        sidecar.update(meta)
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return json_path


def load_sidecar(path) -> dict:
    _, json_path = _pair_paths(path)
    return json.loads(json_path.read_text())


def load_volume(path) -> Volume:
    """Read a ``.raw``/``.json`` pair written by :func:`save_volume`."""
    raw_path, json_path = _pair_paths(path)
    sidecar = json.loads(json_path.read_text())
    dims = tuple(int(n) for n in sidecar["dims"])
    data = np.frombuffer(raw_path.read_bytes(), dtype="<f4")
    if data.size != dims[0] * dims[1] * dims[2]:
        raise GeometryError(
            f"{raw_path} holds {data.size} voxels, sidecar says {dims}"
        )
    data = data.reshape(dims, order="F").astype(np.float64)
    grid = Grid(dims, np.asarray(sidecar["voxel_size_mm"]), np.asarray(sidecar["affine"]))
    return Volume(data, grid)
