"""Single-unit reference solver, field comparison and the field dump format.

The reference solver works on the whole padded grid at once.  It repeats
the update formula of the parallel solver with the same per-cell operation
order but shares no code with it, so agreement between the two is a real
check of the decomposition and the halo exchange.

Dump format (little endian): ``NX NY NZ`` as int64, ``dx dy dz`` as
float64, then ``(NX+2)*(NY+2)*(NZ+2)`` float64 values of the padded field,
z fastest.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = ["Field", "Comparison", "serial_solve", "compare", "write_field", "read_field"]

_HEADER = struct.Struct("<3q3d")


@dataclass
class Field:
    """Padded temperature field, boundary layer included, z fastest."""

    nx: int
    ny: int
    nz: int
    data: np.ndarray
    dx: float = 1.0
    dy: float = 1.0
    dz: float = 1.0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64).reshape(-1)
        expected = (self.nx + 2) * (self.ny + 2) * (self.nz + 2)
        if self.data.size != expected:
            raise ValueError(f"field of {self.data.size} values, expected {expected}")

    @property
    def shape(self):
        return (self.nx + 2, self.ny + 2, self.nz + 2)

    def array(self):
        return self.data.reshape(self.shape)

    def interior(self):
        return self.array()[1:-1, 1:-1, 1:-1]


@dataclass(frozen=True)
class Comparison:
    max_abs_diff: float
    first_diff_index: int | None

    @property
    def identical(self):
        return self.first_diff_index is None


def compare(a, b):
    """Exact elementwise comparison of two fields."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    x, y = a.data, b.data
    # NaN never compares equal, so a NaN cell counts as a difference
    differ = np.flatnonzero(~(x == y))
    if differ.size == 0:
        return Comparison(0.0, None)
    with np.errstate(invalid="ignore"):
        diff = np.abs(x - y)
    return Comparison(float(np.nanmax(diff)) if not np.all(np.isnan(diff)) else float("nan"),
                      int(differ[0]))


def serial_solve(grid, params, callback=None):
    """Solve the whole grid on one unit, no decomposition, no messages.

    ``callback(iteration, padded_array)`` is invoked after each update.
    Returns ``(field, iterations_done, final_max_delta)``.
    """
    dt = params.checked_dt(grid)
    nx, ny, nz = grid.nx, grid.ny, grid.nz
    T = np.empty((nx + 2, ny + 2, nz + 2), dtype=np.float64)
    T[...] = grid.boundary_temp
    T[1:-1, 1:-1, 1:-1] = grid.initial_interior()
    U = T.copy()
    dx2 = grid.dx * grid.dx
    dy2 = grid.dy * grid.dy
    dz2 = grid.dz * grid.dz
    a0, slope = params.alpha0, params.alpha_slope
    done = 0
    delta = 0.0
    for it in range(params.iterations):
        C = T[1:nx + 1, 1:ny + 1, 1:nz + 1]
        two_c = 2.0 * C
        xs = ((T[2:nx + 2, 1:ny + 1, 1:nz + 1] - two_c) + T[0:nx, 1:ny + 1, 1:nz + 1]) / dx2
        ys = ((T[1:nx + 1, 2:ny + 2, 1:nz + 1] - two_c) + T[1:nx + 1, 0:ny, 1:nz + 1]) / dy2
        zs = ((T[1:nx + 1, 1:ny + 1, 2:nz + 2] - two_c) + T[1:nx + 1, 1:ny + 1, 0:nz]) / dz2
        alpha = np.maximum(a0 + slope * C, 0.0)
        U[1:nx + 1, 1:ny + 1, 1:nz + 1] = C + dt * alpha * ((xs + ys) + zs)
        done = it + 1
        cadence = done % params.check_every == 0
        if cadence or done == params.iterations:
            delta = float(np.max(np.abs(U[1:nx + 1, 1:ny + 1, 1:nz + 1] - C))) if C.size else 0.0
        T, U = U, T
        if callback is not None:
            callback(it, T)
        if cadence and params.convergence_eps is not None and delta < params.convergence_eps:
            break
    field = Field(nx, ny, nz, T.copy(), grid.dx, grid.dy, grid.dz)
    return field, done, delta


def write_field(field, path):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(field.nx, field.ny, field.nz, field.dx, field.dy, field.dz))
        fh.write(field.data.astype("<f8", copy=False).tobytes())


def read_field(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ConfigError(f"{path}: truncated field header")
    nx, ny, nz, dx, dy, dz = _HEADER.unpack_from(raw)
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return Field(nx, ny, nz, data, dx, dy, dz)
