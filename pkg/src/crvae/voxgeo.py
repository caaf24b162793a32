"""Occupancy grids and discrete geometric operators on them.

Every operator works on the last three axes, so a leading batch axis is
allowed. Inputs may be plain ``numpy`` arrays or :class:`~crvae.autograd.Tensor`
objects; with tensors the result stays on the tape and is differentiable.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ad

VOLUME_EXTENT = 3.0  # meters per side of the reconstructed cube
VXG_MAGIC = b"VXG1"
VXG_LIMIT = 1e6


@dataclass(frozen=True)
class OccupancyGrid:
    """N x N x N occupancy values in [0, 1], index order (i, j, k) with k fastest."""

    values: np.ndarray
    extent: float = VOLUME_EXTENT

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise ValueError(f"occupancy grid must be cubic, got shape {v.shape}")
        if v.shape[0] < 3:
            raise ValueError("occupancy grid resolution must be at least 3")
        if not np.all((v >= 0.0) & (v <= 1.0)):
            raise ValueError("occupancy values must lie in [0, 1]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def voxel_size(self) -> float:
        return self.extent / self.n


def _values(grid):
    if isinstance(grid, OccupancyGrid):
        return grid.values
    if isinstance(grid, ad.Tensor):
        return grid
    return np.asarray(grid, dtype=np.float64)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, ad.Tensor) else x


def _take(x, idx, axis):
    if isinstance(x, ad.Tensor):
        return ad.take(x, idx, axis=axis)
    return np.take(x, idx, axis=axis)


def _shift(x, offset: int, axis: int):
    """Neighbor at ``offset`` along ``axis`` with clamp-to-edge replication."""
    if offset == 0:
        return x
    n = x.shape[axis]
    idx = np.clip(np.arange(n) + offset, 0, n - 1)
    return _take(x, idx, axis)


def neighbor_offsets(connectivity: int) -> list[tuple[int, int, int]]:
    if connectivity == 6:
        return [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
    if connectivity == 26:
        return [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def laplacian(grid, connectivity: int = 6, boundary: str = "clamp"):
    """Mean of neighbor-minus-center differences over a 6- or 26-neighborhood.

    ``boundary="clamp"`` replicates edge voxels for out-of-range neighbors and
    keeps the divisor at 6 or 26. ``boundary="renormalize"`` drops out-of-range
    neighbors and divides by the in-range count instead.
    """
    v = _values(grid)
    if v.ndim < 3:
        raise ValueError(f"need at least three axes, got shape {v.shape}")
    offsets = neighbor_offsets(connectivity)
    axes = (v.ndim - 3, v.ndim - 2, v.ndim - 1)
    # shift axis by axis and reuse the partial shifts across neighbors
    cache = {(): v}

    def shifted(off):
        key = tuple(off)
        if key not in cache:
            prev = shifted(off[:-1])
            cache[key] = _shift(prev, off[-1], axes[len(off) - 1])
        return cache[key]

    if boundary == "clamp":
        # summing differences keeps constant grids at exactly zero
        total = None
        for off in offsets:
            diff = shifted(off) - v
            total = diff if total is None else total + diff
        return total * (1.0 / len(offsets))
    if boundary == "renormalize":
        shape3 = v.shape[-3:]
        counts = np.zeros(shape3)
        total = None
        for off in offsets:
            inb = _inbounds(shape3, off)
            counts += inb
            diff = _mul_const(shifted(off) - v, np.broadcast_to(inb, v.shape))
            total = diff if total is None else total + diff
        return _mul_const(total, np.broadcast_to(1.0 / counts, v.shape))
    raise ValueError(f"unknown boundary policy {boundary!r}")


def _inbounds(shape3, off) -> np.ndarray:
    mask = np.ones(shape3)
    for ax, (n, o) in enumerate(zip(shape3, off)):
        pos = np.arange(n) + o
        ok = ((pos >= 0) & (pos < n)).astype(float)
        mask = mask * ok.reshape([-1 if a == ax else 1 for a in range(3)])
    return mask


def _mul_const(x, arr: np.ndarray):
    if isinstance(x, ad.Tensor):
        return ad.mul(x, ad.Tensor(np.broadcast_to(arr, x.shape)))
    return x * arr


def surface_mask(grid, lo: float = 0.3, hi: float = 0.7) -> np.ndarray:
    """Boolean mask of voxels with ``lo < value < hi`` (strict on both ends)."""
    if not (0.0 <= lo < hi <= 1.0):
        raise ValueError(f"surface band needs 0 <= lo < hi <= 1, got ({lo}, {hi})")
    v = _data(_values(grid))
    return (v > lo) & (v < hi)


def central_gradient(grid):
    """Per-axis derivative in voxel units: central inside, one-sided at the faces."""
    v = _values(grid)
    if min(v.shape[-3:]) < 3:
        raise ValueError("central_gradient needs at least 3 voxels per axis")
    out = []
    for axis in range(v.ndim - 3, v.ndim):
        n = v.shape[axis]
        up = np.minimum(np.arange(n) + 1, n - 1)
        down = np.maximum(np.arange(n) - 1, 0)
        inv = 1.0 / (up - down)
        shape = [1] * v.ndim
        shape[axis] = n
        diff = _take(v, up, axis) - _take(v, down, axis)
        out.append(_mul_const(diff, np.broadcast_to(inv.reshape(shape), v.shape)))
    return tuple(out)


def gradient_magnitude(grid):
    """Euclidean norm of :func:`central_gradient` per voxel."""
    gx, gy, gz = central_gradient(grid)
    sq = gx * gx + gy * gy + gz * gz
    if isinstance(sq, ad.Tensor):
        return ad.sqrt(sq)
    return np.sqrt(sq)


# ------------------------------------------------------------------ VXG1 io

def write_vxg(path, grid) -> None:
    """Write a cubic grid as ``VXG1`` + uint32 N + N^3 float32, little-endian."""
    v = _data(_values(grid))
    if v.ndim != 3 or len(set(v.shape)) != 1:
        raise ValueError(f"VXG1 stores cubic grids, got shape {v.shape}")
    if not np.all(np.isfinite(v)) or np.any(np.abs(v) > VXG_LIMIT):
        raise ValueError("VXG1 values must be finite and within +-1e6")
    payload = VXG_MAGIC + struct.pack("<I", v.shape[0]) + v.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(payload)


def read_vxg(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != VXG_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[4:8])
    body = raw[8:]
    if len(body) != 4 * n ** 3:
        raise ValueError(f"{path}: expected {n ** 3} values, found {len(body) // 4}")
    v = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(n, n, n)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{path}: non-finite values")
    if np.any(np.abs(v) > VXG_LIMIT):
        raise ValueError(f"{path}: values outside +-1e6")
    return v
