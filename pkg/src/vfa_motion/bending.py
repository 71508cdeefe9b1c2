"""Discrete bending-energy operator for smooth-field regularization.

The quadratic form z'Lz discretizes the integral of the squared second
spatial derivatives (mixed terms counted twice) over the grid, with
second-order differences, per-axis voxel-size scaling and replicate
(Neumann) boundaries. L is symmetric positive semi-definite and annihilates
constants exactly. The operator is matrix-free; ``dense`` exists for small
grids so tests can pin the exact stencil semantics.
"""

from __future__ import annotations

import numpy as np

from .errors import GridMismatchError
from .volume import Grid, Volume, as_grid

__all__ = ["BendingOperator"]

_AXIS_PAIRS = ((0, 1), (0, 2), (1, 2))
_DENSE_LIMIT = 1000


def _sl(axis: int, s: slice) -> tuple:
    out = [slice(None)] * 3
    out[axis] = s
    return tuple(out)


def _pad_replicate(u: np.ndarray, axis: int) -> np.ndarray:
    return np.concatenate(
        [u[_sl(axis, slice(0, 1))], u, u[_sl(axis, slice(-1, None))]], axis=axis
    )


def _fold_pad(z: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of replicate padding: fold pad planes onto the edges."""
    out = z[_sl(axis, slice(1, -1))].copy()
    out[_sl(axis, slice(0, 1))] += z[_sl(axis, slice(0, 1))]
    out[_sl(axis, slice(-1, None))] += z[_sl(axis, slice(-1, None))]
    return out


def _second_diff(u: np.ndarray, axis: int, inv_dx2: float) -> np.ndarray:
    if u.shape[axis] == 1:
        return np.zeros_like(u)
    up = _pad_replicate(u, axis)
    return (
        up[_sl(axis, slice(0, -2))]
        - 2.0 * up[_sl(axis, slice(1, -1))]
        + up[_sl(axis, slice(2, None))]
    ) * inv_dx2


def _second_diff_adjoint(w: np.ndarray, axis: int, inv_dx2: float) -> np.ndarray:
    if w.shape[axis] == 1:
        return np.zeros_like(w)
    n = w.shape[axis]
    shape = list(w.shape)
    shape[axis] = n + 2
    z = np.zeros(shape)
    z[_sl(axis, slice(0, n))] += w
    z[_sl(axis, slice(1, n + 1))] -= 2.0 * w
    z[_sl(axis, slice(2, n + 2))] += w
    return _fold_pad(z, axis) * inv_dx2


def _central_diff(u: np.ndarray, axis: int, inv_2dx: float) -> np.ndarray:
    if u.shape[axis] == 1:
        return np.zeros_like(u)
    up = _pad_replicate(u, axis)
    return (up[_sl(axis, slice(2, None))] - up[_sl(axis, slice(0, -2))]) * inv_2dx


def _central_diff_adjoint(w: np.ndarray, axis: int, inv_2dx: float) -> np.ndarray:
    if w.shape[axis] == 1:
        return np.zeros_like(w)
    n = w.shape[axis]
    shape = list(w.shape)
    shape[axis] = n + 2
    z = np.zeros(shape)
    z[_sl(axis, slice(2, n + 2))] += w
    z[_sl(axis, slice(0, n))] -= w
    return _fold_pad(z, axis) * inv_2dx


def _colsumsq_second(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    if n == 2:
        return np.full(2, 2.0)
    v = np.full(n, 6.0)
    v[0] = v[-1] = 2.0
    return v


def _colsumsq_central(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return np.full(n, 2.0)


class BendingOperator:
    """Matrix-free curvature-penalty operator on a fixed grid geometry.

    Immutable after construction; ``apply`` is pure and thread-safe.
    """

    def __init__(self, geometry):
        if isinstance(geometry, Grid):
            grid = geometry
            self.dims = grid.dims
            self.voxel_size_mm = np.asarray(grid.voxel_size_mm, dtype=np.float64)
        elif isinstance(geometry, tuple) and len(geometry) == 2:
            dims, voxel = geometry
            self.dims = tuple(int(n) for n in dims)
            self.voxel_size_mm = np.asarray(voxel, dtype=np.float64)
        else:
            grid = as_grid(geometry)
            self.dims = grid.dims
            self.voxel_size_mm = np.asarray(grid.voxel_size_mm, dtype=np.float64)
        if len(self.dims) != 3 or any(n < 1 for n in self.dims):
            raise ValueError(f"dims must be three positive counts, got {self.dims}")
        if np.any(self.voxel_size_mm <= 0):
            raise ValueError("voxel sizes must be positive")
        self.voxel_volume = float(np.prod(self.voxel_size_mm))
        self._inv_dx2 = 1.0 / self.voxel_size_mm**2
        self._inv_2dx = 1.0 / (2.0 * self.voxel_size_mm)
        self._diagonal = None

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def _check(self, z: np.ndarray) -> None:
        if z.shape != self.dims:
            raise GridMismatchError(
                f"field shape {z.shape} does not match operator dims {self.dims}"
            )

    def apply_array(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        self._check(z)
        acc = np.zeros(self.dims)
        for ax in range(3):
            d = _second_diff(z, ax, self._inv_dx2[ax])
            acc += _second_diff_adjoint(d, ax, self._inv_dx2[ax])
        for i, j in _AXIS_PAIRS:
            d = _central_diff(_central_diff(z, i, self._inv_2dx[i]), j, self._inv_2dx[j])
            d = _central_diff_adjoint(d, j, self._inv_2dx[j])
            acc += 2.0 * _central_diff_adjoint(d, i, self._inv_2dx[i])
        acc *= self.voxel_volume
        return acc

    def apply(self, z):
        """L z. Accepts a Volume or a raw array and returns the same kind."""
        if isinstance(z, Volume):
            return z.with_data(self.apply_array(z.data))
        return self.apply_array(z)

    def energy(self, z) -> float:
        """Bending energy 0.5 * z'Lz."""
        arr = z.data if isinstance(z, Volume) else np.asarray(z, dtype=np.float64)
        return 0.5 * float(np.vdot(arr, self.apply_array(arr)))

    def diagonal(self) -> np.ndarray:
        """diag(L), exact for the clamped-boundary stencils (cached)."""
        if self._diagonal is None:
            s2 = [_colsumsq_second(n) for n in self.dims]
            c2 = [_colsumsq_central(n) for n in self.dims]
            diag = np.zeros(self.dims)
            for ax in range(3):
                shape = [1, 1, 1]
                shape[ax] = self.dims[ax]
                diag += (s2[ax] * self._inv_dx2[ax] ** 2).reshape(shape)
            for i, j in _AXIS_PAIRS:
                shape_i = [1, 1, 1]
                shape_i[i] = self.dims[i]
                shape_j = [1, 1, 1]
                shape_j[j] = self.dims[j]
                coupling = (
                    c2[i].reshape(shape_i)
                    * c2[j].reshape(shape_j)
                    * (self._inv_2dx[i] * self._inv_2dx[j]) ** 2
                )
                diag += 2.0 * coupling
            diag *= self.voxel_volume
            diag.setflags(write=False)
            self._diagonal = diag
        return self._diagonal

    def dense(self) -> np.ndarray:
        """Explicit matrix, voxel order x-fastest. Small grids only."""
        n = self.n_voxels
        if n > _DENSE_LIMIT:
            raise ValueError(f"dense assembly limited to {_DENSE_LIMIT} voxels, got {n}")
        cols = np.empty((n, n))
        flat = np.zeros(n)
        for j in range(n):
            flat[:] = 0.0
            flat[j] = 1.0
            cols[:, j] = self.apply_array(flat.reshape(self.dims, order="F")).ravel(order="F")
        return cols
