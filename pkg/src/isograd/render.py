"""Differentiable rendering: opacity activation, back-face culling,
truncated alpha compositing, and background blending."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kernels
from .field import VoxelGrid, corner_values, sh_basis, trilinear_interp
from .intersect import Intersection, Ray, ray_intersections


@dataclass
class RenderConfig:
    """Rendering knobs: truncation parameter a, constant background color,
    and back-face culling."""

    a: float = 5.0
    background: np.ndarray = dc_field(default_factory=lambda: np.ones(3))
    cull_backfaces: bool = True

    def __post_init__(self):
        self.background = np.asarray(self.background, np.float64)


@dataclass
class RaySamples:
    """Per-ray rendering record over the culled intersection set."""

    intersections: list[Intersection]
    alpha: np.ndarray        # activated opacity per sample
    alpha_trunc: np.ndarray  # truncated opacity alpha*
    transmittance: np.ndarray
    weights: np.ndarray
    color: np.ndarray
    depth_mode: float | None  # t of the max-weight sample


def opacity_activation(raw):
    """Combined exponential-ReLU activation 1 - exp(-relu(raw))."""
    raw = np.asarray(raw, np.float64)
    out = 1.0 - np.exp(-np.maximum(raw, 0.0))
    return float(out) if out.ndim == 0 else out


def trunc_window(x, a):
    """Reweight window (1 - cos(pi*clamp(a - x, 0, 1)))/2.

    Applied as alpha*(t_i) = gamma(i-1) * alpha(t_i) with i the 1-based
    sample index counted over culled-surviving samples only.
    """
    x = np.asarray(x, np.float64)
    c = np.clip(a - x, 0.0, 1.0)
    out = (1.0 - np.cos(np.pi * c)) / 2.0
    return float(out) if out.ndim == 0 else out


def cull(intersections: list[Intersection], direction) -> list[Intersection]:
    """Keep front-facing (n.d <= 0) and degenerate-normal samples, in order."""
    d = np.asarray(direction, np.float64)
    return [i for i in intersections
            if i.normal is None or float(np.dot(i.normal, d)) <= 0.0]


def composite(intersections: list[Intersection], alphas: np.ndarray,
              colors: np.ndarray, cfg: RenderConfig) -> RaySamples:
    """Truncated front-to-back alpha compositing with background blending.

    C* = sum_i T*_i alpha*_i c_i + (prod_i (1 - alpha*_i)) * background.
    """
    n = len(intersections)
    alphas = np.asarray(alphas, np.float64).reshape(n)
    colors = np.asarray(colors, np.float64).reshape(n, 3)
    gammas = trunc_window(np.arange(n, dtype=np.float64), cfg.a) if n else np.zeros(0)
    astar = gammas * alphas
    trans = np.ones(n)
    if n:
        trans[1:] = np.cumprod(1.0 - astar[:-1])
    weights = trans * astar
    residual = float(np.prod(1.0 - astar)) if n else 1.0
    color = weights @ colors + residual * cfg.background if n \
        else cfg.background.copy()
    depth = float(intersections[int(np.argmax(weights))].t) if n else None
    return RaySamples(intersections=intersections, alpha=alphas,
                      alpha_trunc=astar, transmittance=trans,
                      weights=weights, color=np.asarray(color, np.float64),
                      depth_mode=depth)


def render_ray(grid: VoxelGrid, ray: Ray, cfg: RenderConfig) -> RaySamples:
    """Reference single-ray pipeline: intersections -> culling -> activated
    opacity -> truncation -> SH colors -> compositing.  Deterministic."""
    isects = ray_intersections(grid, ray)
    if cfg.cull_backfaces:
        isects = cull(isects, ray.dir)
    n = len(isects)
    alphas = np.zeros(n)
    colors = np.zeros((n, 3))
    dnorm = float(np.linalg.norm(ray.dir))
    basis = sh_basis(ray.dir / dnorm)
    for i, isec in enumerate(isects):
        alphas[i] = opacity_activation(
            trilinear_interp(corner_values(grid.sigma_alpha, isec.voxel), isec.local))
        coeffs = np.empty((3, 9))
        for ch in range(3):
            for k in range(9):
                coeffs[ch, k] = trilinear_interp(
                    corner_values(grid.sh[..., ch * 9 + k], isec.voxel), isec.local)
        colors[i] = np.maximum(coeffs @ basis, 0.0)
    return composite(isects, alphas, colors, cfg)


# ---------------------------------------------------------------------------
# batched kernel path (used by training, image rendering, and the adjoint)
# ---------------------------------------------------------------------------

@dataclass
class BatchRender:
    """Fused-kernel forward result for a ray batch, including the per-sample
    tape consumed by the adjoint kernels."""

    colors: np.ndarray   # (n, 3) composited
    counts: np.ndarray   # (n,) kept samples per ray
    og: np.ndarray       # (n, 3) index-space origins
    dg: np.ndarray       # (n, 3) index-space directions
    dunit: np.ndarray    # (n, 3) unit world directions
    tape: dict

    def weights(self):
        """(weights, transmittance, residual) per ray, vectorized over the tape."""
        astar = self.tape["astar"]
        n, cap = astar.shape
        mask = np.arange(cap)[None, :] < self.counts[:, None]
        a = np.where(mask, astar, 0.0)
        trans = np.ones((n, cap))
        trans[:, 1:] = np.cumprod(1.0 - a[:, :-1], axis=1)
        w = trans * a
        residual = np.prod(1.0 - a, axis=1)
        return w, trans, residual


def _alloc_tape(n: int, cap: int) -> dict:
    return {
        "vox": np.zeros((n, cap, 3), np.int64),
        "lvl": np.zeros((n, cap), np.int64),
        "t": np.zeros((n, cap)),
        "tp": np.zeros((n, cap)),
        "u": np.zeros((n, cap, 3)),
        "sraw": np.zeros((n, cap)),
        "alpha": np.zeros((n, cap)),
        "astar": np.zeros((n, cap)),
        "gamma": np.zeros((n, cap)),
        "rgbpre": np.zeros((n, cap, 3)),
        "pprime": np.zeros((n, cap)),
        "fscale": np.zeros((n, cap)),
    }


def render_batch(grid: VoxelGrid, origins: np.ndarray, dirs: np.ndarray,
                 cfg: RenderConfig, cap: int = 16,
                 parallel: bool = False) -> BatchRender:
    """Forward-render a batch of world rays through the fused kernel.

    The per-ray tape capacity grows automatically until every kept sample is
    recorded.  Sample collection stops once the truncation window hits zero,
    which leaves all rendered quantities and gradients unchanged.
    """
    origins = np.ascontiguousarray(np.atleast_2d(origins), np.float64)
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), np.float64)
    og, dg = grid.to_index_space(origins, dirs)
    og = np.ascontiguousarray(og)
    dg = np.ascontiguousarray(dg)
    dunit = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    dunit = np.ascontiguousarray(dunit)
    n = origins.shape[0]
    vs = grid.voxel_size
    ivs2 = np.ascontiguousarray(1.0 / (vs * vs))
    bg = np.ascontiguousarray(cfg.background, np.float64)
    if np.isfinite(cfg.a):
        cap = max(cap, int(np.ceil(cfg.a)) + 1)
    while True:
        tape = _alloc_tape(n, cap)
        colors = np.zeros((n, 3))
        counts = np.zeros(n, np.int64)
        args = (grid.delta, grid.sigma_alpha, grid.sh, grid.occupancy,
                grid.levels, og, dg, dunit, ivs2, float(cfg.a), bg,
                bool(cfg.cull_backfaces), cap,
                tape["vox"], tape["lvl"], tape["t"], tape["tp"], tape["u"],
                tape["sraw"], tape["alpha"], tape["astar"], tape["gamma"],
                tape["rgbpre"], tape["pprime"], tape["fscale"],
                colors, counts)
        if parallel:
            needed_arr = np.zeros(n, np.int64)
            kernels.render_forward_par(*args, needed_arr)
            needed = int(needed_arr.max()) if n else 0
        else:
            needed = kernels.render_forward(*args)
        if needed <= cap:
            return BatchRender(colors=colors, counts=counts, og=og, dg=dg,
                               dunit=dunit, tape=tape)
        cap = max(needed, cap * 2)


def render_image(grid: VoxelGrid, camera, cfg: RenderConfig,
                 with_depth: bool = False, parallel: bool = True):
    """Per-pixel render (one center ray per pixel), row-major HDR image.

    Returns the (H, W, 3) float image, plus the (H, W) mode-depth image when
    with_depth is set (NaN where a ray kept no samples).
    """
    from .scene import camera_rays
    origins, dirs = camera_rays(camera)
    batch = render_batch(grid, origins, dirs, cfg, parallel=parallel)
    img = batch.colors.reshape(camera.height, camera.width, 3)
    if not with_depth:
        return img
    w, _, _ = batch.weights()
    has = batch.counts > 0
    idx = np.argmax(w, axis=1)
    depth = np.full(origins.shape[0], np.nan)
    depth[has] = batch.tape["t"][has, idx[has]]
    return img, depth.reshape(camera.height, camera.width)
