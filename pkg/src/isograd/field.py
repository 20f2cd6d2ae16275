"""Voxel grid storage and trilinear evaluation of the surface scalar,
opacity, and spherical-harmonic appearance fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import OutOfBoundsError, PrunedVoxelError

SH_DIM = 27          # 9 basis functions x 3 color channels
FD_BASE_RES = 256.0  # finite-difference scale reference resolution


@dataclass
class LocalPoint:
    """A point expressed relative to its containing voxel's lower corner."""

    voxel: tuple[int, int, int]
    xyz: np.ndarray  # in [0,1]^3


@dataclass
class VoxelGrid:
    """Dense vertex-value grid over an axis-aligned bounding box.

    Vertex arrays are shaped (rx+1, ry+1, rz+1) (plus a trailing 27 axis for
    SH coefficients, channel-major: r0..r8, g0..g8, b0..b8); occupancy is one
    flag per voxel with False meaning pruned.  Level values are fixed during
    optimization and must be strictly increasing.
    """

    resolution: tuple[int, int, int]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    delta: np.ndarray        # surface scalar per vertex
    sigma_alpha: np.ndarray  # raw (pre-activation) opacity per vertex
    sh: np.ndarray           # 27 coefficients per vertex
    occupancy: np.ndarray    # uint8 per voxel
    levels: np.ndarray       # level values tau

    @classmethod
    def empty(cls, resolution, bbox_min, bbox_max, levels) -> "VoxelGrid":
        rx, ry, rz = (int(r) for r in resolution)
        vshape = (rx + 1, ry + 1, rz + 1)
        return cls(
            resolution=(rx, ry, rz),
            bbox_min=np.asarray(bbox_min, np.float64).copy(),
            bbox_max=np.asarray(bbox_max, np.float64).copy(),
            delta=np.zeros(vshape, np.float64),
            sigma_alpha=np.zeros(vshape, np.float64),
            sh=np.zeros(vshape + (SH_DIM,), np.float64),
            occupancy=np.ones((rx, ry, rz), np.uint8),
            levels=np.asarray(levels, np.float64).copy(),
        )

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / np.asarray(self.resolution, np.float64)

    @property
    def n_vertices(self) -> int:
        rx, ry, rz = self.resolution
        return (rx + 1) * (ry + 1) * (rz + 1)

    def validate(self):
        rx, ry, rz = self.resolution
        vshape = (rx + 1, ry + 1, rz + 1)
        if self.delta.shape != vshape or self.sigma_alpha.shape != vshape:
            raise ValueError(f"vertex arrays must have shape {vshape}")
        if self.sh.shape != vshape + (SH_DIM,):
            raise ValueError(f"sh array must have shape {vshape + (SH_DIM,)}")
        if self.occupancy.shape != (rx, ry, rz):
            raise ValueError(f"occupancy must have shape {(rx, ry, rz)}")
        if self.levels.size == 0:
            raise ValueError("levels must be non-empty")
        if not np.all(np.isfinite(self.levels)):
            raise ValueError("levels must be finite")
        if self.levels.size > 1 and not np.all(np.diff(self.levels) > 0):
            raise ValueError("levels must be strictly increasing")
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("bbox_max must exceed bbox_min on every axis")

    def to_index_space(self, origins: np.ndarray, dirs: np.ndarray):
        """Map world-space rays into grid index space (unit voxels).

        The ray parameter t is preserved because the map is affine per axis.
        """
        vs = self.voxel_size
        og = (np.atleast_2d(origins) - self.bbox_min) / vs
        dg = np.atleast_2d(dirs) / vs
        return og, dg

    def locate(self, point) -> LocalPoint:
        """Containing voxel and in-voxel coordinates of a world point."""
        p = np.asarray(point, np.float64)
        g = (p - self.bbox_min) / self.voxel_size
        res = np.asarray(self.resolution)
        if np.any(g < 0.0) or np.any(g > res):
            raise OutOfBoundsError(f"point {p.tolist()} outside bbox")
        vox = np.minimum(np.floor(g).astype(np.int64), res - 1)
        return LocalPoint(voxel=(int(vox[0]), int(vox[1]), int(vox[2])), xyz=g - vox)


def _channel_values(grid: VoxelGrid, channel: str) -> np.ndarray:
    if channel == "delta":
        return grid.delta
    if channel == "sigma_alpha":
        return grid.sigma_alpha
    if channel.startswith("sh"):
        k = int(channel[2:])
        if not 0 <= k < SH_DIM:
            raise ValueError(f"sh channel index out of range: {channel}")
        return grid.sh[..., k]
    raise ValueError(f"unknown channel {channel!r}")


def corner_values(values: np.ndarray, voxel) -> np.ndarray:
    """The 8 vertex values of one voxel in the fixed corner order
    (index m = 4*cx + 2*cy + cz)."""
    i, j, k = voxel
    out = np.empty(8, np.float64)
    kernels._fetch_corners(values, i, j, k, out)
    return out


def trilinear_interp(corners: np.ndarray, p) -> float:
    """Trilinear blend of 8 corner values at unit-cube coordinates p."""
    c = np.ascontiguousarray(corners, np.float64)
    x, y, z = (float(v) for v in p)
    return float(kernels._trilinear(c, x, y, z))


def sample_channel(grid: VoxelGrid, point, channel: str) -> float:
    """Trilinear sample of one stored channel at a world point.

    Raises OutOfBoundsError outside the bbox and PrunedVoxelError inside a
    pruned voxel (the caller should then treat the sample as empty space).
    """
    lp = grid.locate(point)
    i, j, k = lp.voxel
    if grid.occupancy[i, j, k] == 0:
        raise PrunedVoxelError(f"voxel {lp.voxel} is pruned")
    vals = _channel_values(grid, channel)
    return trilinear_interp(corner_values(vals, lp.voxel), lp.xyz)


def eval_sh(coeffs: np.ndarray, direction) -> np.ndarray:
    """Degree-2 real SH radiance for a unit direction, clamped below at 0.

    coeffs holds 27 values, channel-major.  The caller must pass a unit
    direction (|dir| = 1 within 1e-6).
    """
    d = np.asarray(direction, np.float64)
    basis = np.empty(9, np.float64)
    kernels._sh_basis(d[0], d[1], d[2], basis)
    c = np.asarray(coeffs, np.float64).reshape(3, 9)
    return np.maximum(c @ basis, 0.0)


def sh_basis(direction) -> np.ndarray:
    """The 9 degree-2 real SH basis values for a unit direction."""
    d = np.asarray(direction, np.float64)
    basis = np.empty(9, np.float64)
    kernels._sh_basis(d[0], d[1], d[2], basis)
    return basis


def field_gradient(grid: VoxelGrid, point, channel: str = "delta") -> np.ndarray:
    """Analytic world-space gradient of the trilinear field at a point."""
    lp = grid.locate(point)
    i, j, k = lp.voxel
    if grid.occupancy[i, j, k] == 0:
        raise PrunedVoxelError(f"voxel {lp.voxel} is pruned")
    vals = _channel_values(grid, channel)
    g = np.empty(3, np.float64)
    c = corner_values(vals, lp.voxel)
    kernels._trilinear_grad(c, lp.xyz[0], lp.xyz[1], lp.xyz[2], g)
    return g / grid.voxel_size


def surface_normal(grid: VoxelGrid, point):
    """Unit surface normal -g/|g|, or None when the gradient is degenerate.

    Degenerate normals keep their intersections (treated as front-facing);
    dropping them would punch holes from a measure-zero event.
    """
    g = field_gradient(grid, point)
    norm = float(np.linalg.norm(g))
    if norm < kernels.DEGEN_NORMAL_EPS:
        return None
    return -g / norm


def vertex_finite_diff(grid: VoxelGrid, vertex, channel: str = "delta") -> np.ndarray:
    """Forward finite differences at a vertex, each axis scaled by
    resolution/256; zero at the +boundary (Neumann)."""
    vals = _channel_values(grid, channel)
    i, j, k = (int(v) for v in vertex)
    rx, ry, rz = grid.resolution
    out = np.zeros(3, np.float64)
    if i < rx:
        out[0] = (vals[i + 1, j, k] - vals[i, j, k]) * (rx / FD_BASE_RES)
    if j < ry:
        out[1] = (vals[i, j + 1, k] - vals[i, j, k]) * (ry / FD_BASE_RES)
    if k < rz:
        out[2] = (vals[i, j, k + 1] - vals[i, j, k]) * (rz / FD_BASE_RES)
    return out


def vertex_finite_diff_all(values: np.ndarray, resolution, scaled: bool = True) -> np.ndarray:
    """Forward finite differences for every vertex at once; shape (...,3).

    With scaled=True each axis is multiplied by resolution/256 (the TV-loss
    convention); otherwise raw index-space differences are returned.
    +boundary entries are zero.
    """
    rx, ry, rz = resolution
    out = np.zeros(values.shape + (3,), np.float64)
    out[:-1, :, :, 0] = values[1:, :, :] - values[:-1, :, :]
    out[:, :-1, :, 1] = values[:, 1:, :] - values[:, :-1, :]
    out[:, :, :-1, 2] = values[:, :, 1:] - values[:, :, :-1]
    if scaled:
        out[..., 0] *= rx / FD_BASE_RES
        out[..., 1] *= ry / FD_BASE_RES
        out[..., 2] *= rz / FD_BASE_RES
    return out


def vertex_finite_diff_transpose(diffs: np.ndarray, resolution, scaled: bool = True) -> np.ndarray:
    """Adjoint of vertex_finite_diff_all: scatters per-vertex difference
    cotangents back onto the vertex values."""
    rx, ry, rz = resolution
    d = diffs.astype(np.float64, copy=True)
    if scaled:
        d[..., 0] *= rx / FD_BASE_RES
        d[..., 1] *= ry / FD_BASE_RES
        d[..., 2] *= rz / FD_BASE_RES
    out = np.zeros(diffs.shape[:-1], np.float64)
    out[1:, :, :] += d[:-1, :, :, 0]
    out[:-1, :, :] -= d[:-1, :, :, 0]
    out[:, 1:, :] += d[:, :-1, :, 1]
    out[:, :-1, :] -= d[:, :-1, :, 1]
    out[:, :, 1:] += d[:, :, :-1, 2]
    out[:, :, :-1] -= d[:, :, :-1, 2]
    return out


def vertex_mask(occupancy: np.ndarray) -> np.ndarray:
    """Vertices incident to at least one non-pruned voxel."""
    occ = occupancy.astype(bool)
    nx, ny, nz = occ.shape
    mask = np.zeros((nx + 1, ny + 1, nz + 1), bool)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                mask[dx:nx + dx, dy:ny + dy, dz:nz + dz] |= occ
    return mask
