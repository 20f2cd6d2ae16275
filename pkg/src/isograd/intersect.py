"""Exact ray/level-set intersections: voxel traversal, per-voxel cubic
polynomials, and closed-form root solving."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kernels
from .field import VoxelGrid, corner_values

# All root solving is done in 64-bit floats regardless of storage dtype; the
# trigonometric branch of the closed-form solution is numerically sensitive.


@dataclass
class Ray:
    """World-space ray.  Directions are deliberately not normalized: t then
    carries the direction's scale, matching how image rays are generated."""

    origin: np.ndarray
    dir: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, np.float64)
        self.dir = np.asarray(self.dir, np.float64)
        if not np.linalg.norm(self.dir) > 0:
            raise ValueError("ray direction must be non-zero")


@dataclass
class VoxelHit:
    """One voxel interval of a traversed ray, in grid index space.

    shifted_origin is o' = o + t_near*d - l, so the in-voxel point at local
    parameter t' = t - t_near is o' + t'*d with coordinates in [0,1]^3.
    """

    voxel: tuple[int, int, int]
    t_near: float
    t_far: float
    shifted_origin: np.ndarray


@dataclass
class Cubic:
    f3: float
    f2: float
    f1: float
    f0: float

    def __call__(self, t: float) -> float:
        return ((self.f3 * t + self.f2) * t + self.f1) * t + self.f0

    def deriv(self, t: float) -> float:
        return (3.0 * self.f3 * t + 2.0 * self.f2) * t + self.f1


@dataclass
class Intersection:
    """An exact ray/level-set hit.  normal is None when the field gradient is
    degenerate there (such hits are kept and treated as front-facing)."""

    t: float
    point: np.ndarray
    level_index: int
    normal: np.ndarray | None
    front_facing: bool
    voxel: tuple[int, int, int] = (0, 0, 0)
    local: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))


class RootStatus(enum.Enum):
    OK = 0
    NO_ROOT = 1    # constant polynomial != tau
    ALL_ROOTS = 2  # constant polynomial == tau: a level-set-filling voxel


def ray_aabb(ray: Ray, box_min, box_max):
    """Slab-method entry/exit parameters of a ray against a box, or None.

    The ray is a half-line: boxes entirely behind the origin miss, and an
    origin inside the box yields t_near = 0.
    """
    b0 = np.asarray(box_min, np.float64)
    b1 = np.asarray(box_max, np.float64)
    hit, t0, t1 = kernels._ray_aabb(
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.dir[0], ray.dir[1], ray.dir[2],
        b0[0], b0[1], b0[2], b1[0], b1[1], b1[2])
    if not hit:
        return None
    return float(t0), float(t1)


def traverse_voxels(ray: Ray, grid: VoxelGrid) -> list[VoxelHit]:
    """Ordered non-pruned voxels crossed by the ray; intervals tile the
    in-grid segment with boundaries shared exactly between neighbours."""
    og, dg = grid.to_index_space(ray.origin, ray.dir)
    og, dg = og[0], dg[0]
    nx, ny, nz = grid.resolution
    cap = nx + ny + nz + 3
    vbuf = np.empty((cap, 3), np.int64)
    tbuf = np.empty((cap, 2), np.float64)
    n = kernels.traverse_fill(grid.occupancy, og[0], og[1], og[2],
                              dg[0], dg[1], dg[2], vbuf, tbuf)
    hits = []
    for h in range(n):
        l = vbuf[h].astype(np.float64)
        hits.append(VoxelHit(
            voxel=(int(vbuf[h, 0]), int(vbuf[h, 1]), int(vbuf[h, 2])),
            t_near=float(tbuf[h, 0]),
            t_far=float(tbuf[h, 1]),
            shifted_origin=og + tbuf[h, 0] * dg - l,
        ))
    return hits


def cubic_coeffs(hit: VoxelHit, corners: np.ndarray, direction) -> Cubic:
    """Cubic coefficients of the trilinear field along the ray within one
    voxel (in the voxel frame of hit.shifted_origin)."""
    c = np.ascontiguousarray(corners, np.float64)
    d = np.asarray(direction, np.float64)
    f = np.empty(4, np.float64)
    o = hit.shifted_origin
    kernels._cubic_coeffs(c, o[0], o[1], o[2], d[0], d[1], d[2], f)
    return Cubic(f3=float(f[3]), f2=float(f[2]), f1=float(f[1]), f0=float(f[0]))


def solve_cubic(c: Cubic, tau: float):
    """All real roots of f3 t^3 + f2 t^2 + f1 t + f0 = tau, ascending.

    Returns (roots, status).  status is NO_ROOT for a constant polynomial
    below/above tau and ALL_ROOTS for a constant polynomial equal to tau
    (treated by callers as producing no intersections); both come with an
    empty root array.  Identical roots of the closed-form solution are
    reported once.
    """
    buf = np.empty(3, np.float64)
    cnt, all_roots = kernels._cubic_roots(c.f3, c.f2, c.f1, c.f0 - tau, buf)
    if all_roots:
        return np.empty(0), RootStatus.ALL_ROOTS
    scale = max(abs(c.f3), abs(c.f2), abs(c.f1), abs(c.f0 - tau))
    if cnt == 0 and scale > 0 and max(abs(c.f3), abs(c.f2), abs(c.f1)) < kernels.CUBIC_REL_EPS * scale:
        return np.empty(0), RootStatus.NO_ROOT
    roots = np.array(sorted(
        kernels._polish_root(c.f3, c.f2, c.f1, c.f0 - tau, buf[q]) for q in range(cnt)))
    # a multiple root can be reported more than once by the trig branch
    if roots.size > 1:
        keep = np.ones(roots.size, bool)
        for q in range(1, roots.size):
            if roots[q] - roots[q - 1] < 1e-12 * max(1.0, abs(roots[q])):
                keep[q] = False
        roots = roots[keep]
    return roots, RootStatus.OK


def voxel_intersections(grid: VoxelGrid, hit: VoxelHit, direction) -> list[Intersection]:
    """All level-set crossings inside one traversed voxel, sorted by t.

    direction is the ray direction in grid index space (the frame of
    hit.shifted_origin).  Roots are kept on [0, t_far - t_near], duplicates
    within 1e-7 of the span collapse to one, and each hit carries its world
    position, world normal, and facing flag.
    """
    d = np.asarray(direction, np.float64)
    c8 = corner_values(grid.delta, hit.voxel)
    f = np.empty(4, np.float64)
    o = hit.shifted_origin
    kernels._cubic_coeffs(c8, o[0], o[1], o[2], d[0], d[1], d[2], f)
    span = hit.t_far - hit.t_near
    nl = grid.levels.shape[0]
    tp_buf = np.empty(3 * nl, np.float64)
    lv_buf = np.empty(3 * nl, np.int64)
    m = kernels._solve_levels_in_voxel(f[3], f[2], f[1], f[0], grid.levels,
                                       span, tp_buf, lv_buf)
    vs = grid.voxel_size
    vox = np.asarray(hit.voxel, np.float64)
    out = []
    g = np.empty(3, np.float64)
    for q in range(m):
        tp = float(tp_buf[q])
        u = o + tp * d
        kernels._trilinear_grad(c8, u[0], u[1], u[2], g)
        g_world = g / vs
        gnorm = float(np.linalg.norm(g_world))
        if gnorm < kernels.DEGEN_NORMAL_EPS:
            normal = None
            front = True
        else:
            normal = -g_world / gnorm
            front = bool(g[0] * d[0] + g[1] * d[1] + g[2] * d[2] >= 0.0)
        point = grid.bbox_min + (vox + u) * vs
        out.append(Intersection(
            t=hit.t_near + tp,
            point=point,
            level_index=int(lv_buf[q]),
            normal=normal,
            front_facing=front,
            voxel=hit.voxel,
            local=u.copy(),
        ))
    return out


def ray_intersections(grid: VoxelGrid, ray: Ray) -> list[Intersection]:
    """All level-set crossings along a world ray, globally sorted by t with
    duplicates at shared voxel faces removed (tolerance 1e-7 on t)."""
    _, dg = grid.to_index_space(ray.origin, ray.dir)
    dg = dg[0]
    out: list[Intersection] = []
    for hit in traverse_voxels(ray, grid):
        for isec in voxel_intersections(grid, hit, dg):
            if out and isec.t - out[-1].t < kernels.FACE_DEDUP_TOL \
                    and isec.level_index == out[-1].level_index:
                continue
            out.append(isec)
    return out
