"""Bit-exact binary checkpoint container shared by density and surface grids.

Layout (all little-endian):
    magic       4 bytes  b"ASRF"
    version     u32      1
    kind        u8       0 = density, 1 = surface
    resolution  3 x u32
    bbox        6 x f32  (min xyz, max xyz)
    n_levels    u8       (0 for density)
    levels      n_levels x f32   (surface only)
    occupancy   1 byte per voxel (all ones for density), C order
    arrays      f32: delta-or-sigma [V], sigma_alpha [V] (surface only),
                sh [27V] (vertex-major)
Vertex arrays are C order with x outermost and z innermost; the file length
is exactly determined by the header.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .field import SH_DIM, VoxelGrid
from .initialization import DensityGrid

MAGIC = b"ASRF"
VERSION = 1
KIND_DENSITY = 0
KIND_SURFACE = 1


def _pack_header(kind: int, resolution, bbox_min, bbox_max, levels) -> bytes:
    parts = [MAGIC, struct.pack("<IB", VERSION, kind),
             struct.pack("<III", *(int(r) for r in resolution)),
             np.asarray(list(bbox_min) + list(bbox_max), "<f4").tobytes(),
             struct.pack("<B", len(levels)),
             np.asarray(levels, "<f4").tobytes()]
    return b"".join(parts)


def save_surface(grid: VoxelGrid, path):
    blob = [_pack_header(KIND_SURFACE, grid.resolution, grid.bbox_min,
                         grid.bbox_max, grid.levels),
            np.ascontiguousarray(grid.occupancy, np.uint8).tobytes(),
            grid.delta.astype("<f4").tobytes(),
            grid.sigma_alpha.astype("<f4").tobytes(),
            grid.sh.astype("<f4").tobytes()]
    Path(path).write_bytes(b"".join(blob))


def save_density(grid: DensityGrid, path):
    occ = np.ones(tuple(grid.resolution), np.uint8)
    blob = [_pack_header(KIND_DENSITY, grid.resolution, grid.bbox_min,
                         grid.bbox_max, ()),
            occ.tobytes(),
            grid.sigma.astype("<f4").tobytes(),
            grid.sh.astype("<f4").tobytes()]
    Path(path).write_bytes(b"".join(blob))


class _Cursor:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"{self.path}: truncated (wanted {n} more bytes)",
                              offset=self.off)
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def f32_array(self, count: int, shape) -> np.ndarray:
        raw = self.take(count * 4)
        return np.frombuffer(raw, "<f4").astype(np.float64).reshape(shape)


def _read_header(cur: _Cursor):
    magic = cur.take(4)
    if magic != MAGIC:
        raise FormatError(f"{cur.path}: bad magic {magic!r}, expected {MAGIC!r}",
                          offset=0)
    version, kind = struct.unpack("<IB", cur.take(5))
    if version != VERSION:
        raise FormatError(f"{cur.path}: unsupported version {version}, "
                          f"expected {VERSION}", offset=4)
    if kind not in (KIND_DENSITY, KIND_SURFACE):
        raise FormatError(f"{cur.path}: unknown checkpoint kind {kind}", offset=8)
    resolution = struct.unpack("<III", cur.take(12))
    bbox = np.frombuffer(cur.take(24), "<f4").astype(np.float64)
    (n_levels,) = struct.unpack("<B", cur.take(1))
    levels = np.frombuffer(cur.take(4 * n_levels), "<f4").astype(np.float64)
    return kind, resolution, bbox[:3], bbox[3:], levels


def peek_kind(path) -> int:
    cur = _Cursor(Path(path).read_bytes(), path)
    kind, *_ = _read_header(cur)
    return kind


def load_surface(path) -> VoxelGrid:
    kind, grid = load_any(path)
    if kind != KIND_SURFACE:
        raise FormatError(f"{path}: expected a surface checkpoint, found a "
                          f"density checkpoint (kind {kind})")
    return grid


def load_density(path) -> DensityGrid:
    kind, grid = load_any(path)
    if kind != KIND_DENSITY:
        raise FormatError(f"{path}: expected a density checkpoint, found a "
                          f"surface checkpoint (kind {kind})")
    return grid


def load_any(path):
    """Load either checkpoint kind; returns (kind, VoxelGrid | DensityGrid)."""
    data = Path(path).read_bytes()
    cur = _Cursor(data, path)
    kind, resolution, bmin, bmax, levels = _read_header(cur)
    rx, ry, rz = resolution
    vshape = (rx + 1, ry + 1, rz + 1)
    nvox = rx * ry * rz
    nvert = vshape[0] * vshape[1] * vshape[2]
    occ = np.frombuffer(cur.take(nvox), np.uint8).reshape(rx, ry, rz).copy()
    if kind == KIND_SURFACE:
        delta = cur.f32_array(nvert, vshape)
        sigma_alpha = cur.f32_array(nvert, vshape)
        sh = cur.f32_array(nvert * SH_DIM, vshape + (SH_DIM,))
        if cur.off != len(data):
            raise FormatError(f"{path}: {len(data) - cur.off} trailing bytes",
                              offset=cur.off)
        grid = VoxelGrid(resolution=(rx, ry, rz), bbox_min=bmin, bbox_max=bmax,
                         delta=delta, sigma_alpha=sigma_alpha, sh=sh,
                         occupancy=occ, levels=levels)
        grid.validate()
        return kind, grid
    sigma = cur.f32_array(nvert, vshape)
    sh = cur.f32_array(nvert * SH_DIM, vshape + (SH_DIM,))
    if cur.off != len(data):
        raise FormatError(f"{path}: {len(data) - cur.off} trailing bytes",
                          offset=cur.off)
    return kind, DensityGrid(resolution=(rx, ry, rz), bbox_min=bmin,
                             bbox_max=bmax, sigma=sigma, sh=sh)
