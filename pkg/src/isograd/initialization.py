"""Coarse initialization: fit (or load) a density + SH grid by classic
volume rendering, then convert it into the surface representation via the
normalization of raw level values."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kernels
from .errors import ConvergenceWarning, DegenerateFieldError
from .field import SH_DIM, VoxelGrid
from .scene import Dataset, camera_rays
from .train import rmsprop_step

DEFAULT_TAU_SIGMA = (10.0, 30.0, 50.0, 70.0, 90.0)


@dataclass
class DensityGrid:
    """Volume-density grid (raw values, relu-activated during rendering)
    with per-vertex SH appearance."""

    resolution: tuple[int, int, int]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    sigma: np.ndarray
    sh: np.ndarray

    @classmethod
    def empty(cls, resolution, bbox_min, bbox_max) -> "DensityGrid":
        rx, ry, rz = (int(r) for r in resolution)
        vshape = (rx + 1, ry + 1, rz + 1)
        return cls(resolution=(rx, ry, rz),
                   bbox_min=np.asarray(bbox_min, np.float64).copy(),
                   bbox_max=np.asarray(bbox_max, np.float64).copy(),
                   sigma=np.zeros(vshape, np.float64),
                   sh=np.zeros(vshape + (SH_DIM,), np.float64))

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / np.asarray(self.resolution, np.float64)


@dataclass
class FitConfig:
    """Minimal density-fitting recipe: stratified samples along each ray,
    alpha_j = 1 - exp(-relu(sigma_j) dt), photometric MSE plus TV on sigma,
    RMSProp updates.

    With solidify_hidden on, space that no training ray can see through
    (transmittance ~ 0 from every view, i.e. enclosed interior) is flooded
    with the max density of its observed boundary after fitting, so solid
    objects stay solid instead of hollow shells.
    """

    iters: int = 1000
    batch_rays: int = 5000
    lr_sigma: float = 0.5
    lr_sh: float = 0.01
    step_size: float = 0.5       # in voxels
    tv_lambda: float = 1e-5
    sigma_init: float = 0.1
    sh_init_dc: float = 1.7725   # mid-gray through the DC basis constant
    rmsprop_decay: float = 0.95
    rmsprop_eps: float = 1e-8
    seed: int = 0
    target_err: float = 0.05
    eval_rays: int = 20000
    log_every: int = 50
    beta_lambda: float = 1e-3    # residual-transmittance prior weight
    beta_eps: float = 0.1
    solidify_hidden: bool = True
    visibility_floor: float = 0.05


def _dataset_rays(dataset: Dataset):
    origins = []
    dirs = []
    gts = []
    for cam, img in zip(dataset.cameras, dataset.images):
        o, d = camera_rays(cam)
        origins.append(o)
        dirs.append(d)
        gts.append(img.reshape(-1, 3))
    return (np.concatenate(origins), np.concatenate(dirs), np.concatenate(gts))


def _ray_kernel_args(grid: DensityGrid, origins, dirs, step_vox):
    vs = grid.voxel_size
    og = np.ascontiguousarray((origins - grid.bbox_min) / vs)
    dg = np.ascontiguousarray(dirs / vs)
    dn = np.linalg.norm(dirs, axis=1, keepdims=True)
    dunit = np.ascontiguousarray(dirs / dn)
    dg_norm = np.linalg.norm(dg, axis=1)
    step_param = np.ascontiguousarray(step_vox / dg_norm)
    dt_world = np.ascontiguousarray(step_param * dn[:, 0])
    return og, dg, dunit, step_param, dt_world


def _density_tv_grad(grid: DensityGrid):
    """Index-space TV (resolution/256 scaling, Neumann) on raw density."""
    from .field import vertex_finite_diff_all, vertex_finite_diff_transpose
    d = vertex_finite_diff_all(grid.sigma, grid.resolution, scaled=True)
    norms = np.sqrt(np.sum(d * d, axis=-1))
    nv = norms.size
    loss = float(norms.sum() / nv)
    inv = np.zeros_like(norms)
    nz = norms > 0.0
    inv[nz] = 1.0 / norms[nz]
    grad = vertex_finite_diff_transpose(d * inv[..., None] / nv,
                                        grid.resolution, scaled=True)
    return loss, grad


def render_density(grid: DensityGrid, origins, dirs, step_vox: float = 0.5,
                   background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Deterministic (jitter-free) volume render of a density grid."""
    og, dg, dunit, step_param, dt_world = _ray_kernel_args(grid, origins, dirs, step_vox)
    n = og.shape[0]
    diag = float(np.linalg.norm(grid.resolution))
    max_steps = int(np.ceil(diag / step_vox)) + 2
    jitter = np.full((n, max_steps), 0.5)
    colors = np.zeros((n, 3))
    kernels.density_forward(grid.sigma, grid.sh, og, dg, dunit, step_param,
                            dt_world, jitter,
                            np.asarray(background, np.float64), colors)
    return colors


def fit_density(dataset: Dataset, cfg: FitConfig, resolution=(64, 64, 64),
                bbox_min=(-1.0, -1.0, -1.0), bbox_max=(1.0, 1.0, 1.0)):
    """Fit a density + SH grid to the dataset.  Returns (DensityGrid, log).

    Emits a ConvergenceWarning (and proceeds) when the final subsampled
    training-view error stays at or above cfg.target_err.
    """
    grid = DensityGrid.empty(resolution, bbox_min, bbox_max)
    grid.sigma[:] = cfg.sigma_init
    grid.sh[..., 0] = cfg.sh_init_dc
    grid.sh[..., 9] = cfg.sh_init_dc
    grid.sh[..., 18] = cfg.sh_init_dc

    origins, dirs, gts = _dataset_rays(dataset)
    og, dg, dunit, step_param, dt_world = _ray_kernel_args(
        grid, origins, dirs, cfg.step_size)
    n_pixels = og.shape[0]
    diag = float(np.linalg.norm(grid.resolution))
    max_steps = int(np.ceil(diag / cfg.step_size)) + 2
    bg = np.asarray(dataset.background, np.float64)

    rng = np.random.default_rng(cfg.seed)
    v_sigma = np.zeros_like(grid.sigma)
    v_sh = np.zeros_like(grid.sh)
    d_sigma = np.zeros_like(grid.sigma)
    d_sh = np.zeros_like(grid.sh)
    colors = np.zeros((cfg.batch_rays, 3))
    log = []
    for step in range(cfg.iters):
        idx = rng.integers(0, n_pixels, cfg.batch_rays)
        jitter = rng.random((cfg.batch_rays, max_steps))
        d_sigma[:] = 0.0
        d_sh[:] = 0.0
        sq = kernels.density_fwd_bwd(
            grid.sigma, grid.sh,
            np.ascontiguousarray(og[idx]), np.ascontiguousarray(dg[idx]),
            np.ascontiguousarray(dunit[idx]),
            np.ascontiguousarray(step_param[idx]),
            np.ascontiguousarray(dt_world[idx]),
            jitter, np.ascontiguousarray(gts[idx]), bg,
            1.0 / cfg.batch_rays, cfg.beta_lambda / cfg.batch_rays,
            cfg.beta_eps, d_sigma, d_sh, colors)
        mse = sq / cfg.batch_rays
        tv_val, tv_grad = _density_tv_grad(grid)
        d_sigma += cfg.tv_lambda * tv_grad
        rmsprop_step(grid.sigma, d_sigma, v_sigma, cfg.lr_sigma,
                     cfg.rmsprop_decay, cfg.rmsprop_eps)
        rmsprop_step(grid.sh, d_sh, v_sh, cfg.lr_sh,
                     cfg.rmsprop_decay, cfg.rmsprop_eps)
        if step % cfg.log_every == 0 or step == cfg.iters - 1:
            log.append({"iter": step, "mse": mse, "tv": tv_val,
                        "total": mse + cfg.tv_lambda * tv_val})

    if cfg.solidify_hidden:
        solidify_hidden(grid, og, dg, step_param, dt_world, cfg.visibility_floor)

    # subsampled mean per-channel training error
    eval_rng = np.random.default_rng(cfg.seed + 1)
    eidx = eval_rng.integers(0, n_pixels, min(cfg.eval_rays, n_pixels))
    pred = render_density(grid, origins[eidx], dirs[eidx], cfg.step_size, bg)
    err = float(np.mean(np.abs(pred - gts[eidx])))
    if err >= cfg.target_err:
        warnings.warn(f"density fit finished at mean error {err:.4f} "
                      f">= target {cfg.target_err}", ConvergenceWarning)
    return grid, {"log": log, "final_err": err}


def solidify_hidden(grid: DensityGrid, og, dg, step_param, dt_world,
                    visibility_floor: float = 0.05):
    """Fill enclosed (never-seen) space with the max density of its observed
    boundary, flooding inward, so no level crossing can appear there."""
    from scipy.ndimage import maximum_filter

    rx, ry, rz = grid.resolution
    max_t = np.zeros((rx, ry, rz))
    kernels.visibility_max_transmittance(grid.sigma, og, dg, step_param,
                                         dt_world, max_t)
    observed_vox = max_t > visibility_floor
    seen = np.zeros((rx + 1, ry + 1, rz + 1), bool)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                seen[dx:rx + dx, dy:ry + dy, dz:rz + dz] |= observed_vox
    if seen.all():
        return
    cross = np.zeros((3, 3, 3), bool)
    cross[1, 1, 1] = cross[0, 1, 1] = cross[2, 1, 1] = True
    cross[1, 0, 1] = cross[1, 2, 1] = cross[1, 1, 0] = cross[1, 1, 2] = True
    orig = grid.sigma.copy()
    vals = np.where(seen, grid.sigma, -np.inf)
    for _ in range(int(rx + ry + rz)):
        pending = ~np.isfinite(vals)
        if not pending.any():
            break
        grown = maximum_filter(vals, footprint=cross, mode="nearest")
        vals[pending] = grown[pending]
    still = ~np.isfinite(vals)
    vals[still] = orig[still]
    hidden = ~seen & ~still
    grid.sigma[hidden] = np.maximum(orig[hidden], vals[hidden])


# ---------------------------------------------------------------------------
# conversion to the surface representation
# ---------------------------------------------------------------------------

def mean_gradient_norm(sigma: np.ndarray) -> float:
    """Average Euclidean norm over vertices of the unscaled index-space
    forward differences (zero at the +boundary)."""
    d = np.zeros(sigma.shape + (3,))
    d[:-1, :, :, 0] = sigma[1:] - sigma[:-1]
    d[:, :-1, :, 1] = sigma[:, 1:] - sigma[:, :-1]
    d[:, :, :-1, 2] = sigma[:, :, 1:] - sigma[:, :, :-1]
    return float(np.mean(np.sqrt(np.sum(d * d, axis=-1))))


def init_surface(density: DensityGrid, tau_sigma=DEFAULT_TAU_SIGMA):
    """Normalize raw density into the surface scalar and its level values.

    delta = (sigma - median(tau_sigma)) / mean_grad_norm, and each raw level
    maps through the same affine transform.  Raises DegenerateFieldError on
    a (numerically) constant density field.
    """
    tau_sigma = np.asarray(tau_sigma, np.float64)
    if tau_sigma.size == 0 or np.any(np.diff(tau_sigma) <= 0):
        raise ValueError("tau_sigma must be non-empty and ascending")
    gbar = mean_gradient_norm(density.sigma)
    if gbar < 1e-12:
        raise DegenerateFieldError("constant density field cannot be normalized")
    tau_med = float(np.median(tau_sigma))
    delta = (density.sigma - tau_med) / gbar
    levels = (tau_sigma - tau_med) / gbar
    return delta, levels


def init_opacity(density: DensityGrid, s_sigma: float = 0.05) -> np.ndarray:
    """Raw surface opacity: the density rescaled by s_sigma (negative raw
    values pass through; the activation handles them)."""
    return s_sigma * density.sigma


def prune(density: DensityGrid, threshold: float = 5.0) -> np.ndarray:
    """Voxel occupancy: kept iff any of its 8 vertices reaches the density
    threshold, so voxels straddling a surface survive."""
    s = density.sigma
    keep = np.zeros(tuple(r for r in density.resolution), bool)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                nx, ny, nz = density.resolution
                keep |= s[dx:nx + dx, dy:ny + dy, dz:nz + dz] >= threshold
    return keep.astype(np.uint8)


def build_surface_grid(density: DensityGrid, tau_sigma=DEFAULT_TAU_SIGMA,
                       s_sigma: float = 0.05,
                       prune_threshold: float = 5.0) -> VoxelGrid:
    """Full conversion: normalized surface scalars and levels, rescaled
    opacity, SH copied unchanged, and density-threshold pruning."""
    delta, levels = init_surface(density, tau_sigma)
    grid = VoxelGrid(
        resolution=density.resolution,
        bbox_min=density.bbox_min.copy(),
        bbox_max=density.bbox_max.copy(),
        delta=delta,
        sigma_alpha=init_opacity(density, s_sigma),
        sh=density.sh.copy(),
        occupancy=prune(density, prune_threshold),
        levels=np.asarray(levels, np.float64),
    )
    grid.validate()
    return grid


def load_density(path) -> DensityGrid:
    from .checkpoint import load_density as _load
    return _load(path)


def save_density(grid: DensityGrid, path):
    from .checkpoint import save_density as _save
    _save(grid, path)
