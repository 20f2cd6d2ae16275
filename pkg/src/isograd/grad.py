"""Reverse-mode differentiation of the rendering pipeline down to the grid
parameters, using hand-written adjoints over the per-ray tape."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .field import SH_DIM, VoxelGrid
from .intersect import Cubic, Ray
from .render import BatchRender, RenderConfig, render_batch


@dataclass
class GradBuffer:
    """Accumulated loss partials, shaped like the grid parameter arrays."""

    d_delta: np.ndarray
    d_sigma_alpha: np.ndarray
    d_sh: np.ndarray

    @classmethod
    def zeros_like(cls, grid: VoxelGrid) -> "GradBuffer":
        return cls(d_delta=np.zeros_like(grid.delta),
                   d_sigma_alpha=np.zeros_like(grid.sigma_alpha),
                   d_sh=np.zeros_like(grid.sh))

    def scale(self, s: float) -> "GradBuffer":
        self.d_delta *= s
        self.d_sigma_alpha *= s
        self.d_sh *= s
        return self

    def all_finite(self) -> bool:
        return (np.all(np.isfinite(self.d_delta))
                and np.all(np.isfinite(self.d_sigma_alpha))
                and np.all(np.isfinite(self.d_sh)))


def root_gradient(c: Cubic, t_root: float):
    """dt/d(f3, f2, f1, f0) of a polynomial root by implicit differentiation.

    dt/df_k = -t^k / P'(t).  Returns None (zero gradient, a tangential hit)
    when |P'| falls below 1e-8 times the coefficient scale: the true
    derivative is unbounded there and would destabilize optimization.
    """
    dp = c.deriv(t_root)
    scale = max(abs(c.f3), abs(c.f2), abs(c.f1), abs(c.f0))
    if abs(dp) < kernels.ROOT_GRAD_EPS * max(1.0, scale):
        return None
    return np.array([-t_root ** 3, -t_root ** 2, -t_root, -1.0]) / dp


def backward_batch(grid: VoxelGrid, batch: BatchRender, d_colors: np.ndarray,
                   cfg: RenderConfig, lam_conv: float = 0.0,
                   lam_ent: float = 0.0, buf: GradBuffer | None = None,
                   deterministic: bool = True) -> GradBuffer:
    """Accumulate gradients of sum_r (d_colors[r] . C*_r + lam_conv * L_conv_r
    + lam_ent * L_entropy_r) into a GradBuffer.

    deterministic=True accumulates rays serially in batch order, which is
    bit-reproducible; the parallel mode reduces per-thread buffers in fixed
    thread order and is stable only for a fixed thread count.
    """
    if buf is None:
        buf = GradBuffer.zeros_like(grid)
    d_colors = np.ascontiguousarray(np.atleast_2d(d_colors), np.float64)
    bg = np.ascontiguousarray(cfg.background, np.float64)
    t = batch.tape
    common = (grid.sigma_alpha, grid.sh, batch.dg, batch.dunit, batch.counts,
              t["vox"], t["t"], t["u"], t["sraw"], t["astar"], t["gamma"],
              t["rgbpre"], t["pprime"], t["fscale"],
              d_colors, bg, float(lam_conv), float(lam_ent))
    if deterministic:
        kernels.render_backward(*common, buf.d_delta, buf.d_sigma_alpha, buf.d_sh)
    else:
        nt = kernels.thread_buffer_count()
        dd = np.zeros((nt,) + grid.delta.shape)
        ds = np.zeros((nt,) + grid.sigma_alpha.shape)
        dh = np.zeros((nt,) + grid.sh.shape)
        kernels.render_backward_par(*common, dd, ds, dh)
        buf.d_delta += dd.sum(axis=0)
        buf.d_sigma_alpha += ds.sum(axis=0)
        buf.d_sh += dh.sum(axis=0)
    return buf


def backward_ray(grid: VoxelGrid, ray: Ray, cfg: RenderConfig,
                 d_color, buf: GradBuffer | None = None) -> GradBuffer:
    """Exact partials of (d_color . C*) for one ray, accumulated into buf.

    The chain includes both paths through every intersection: the direct one
    (opacity and color read at the fixed depth) and the geometric one (the
    root depth moving with the surface scalars), which also perturbs the
    transmittance of every later sample.  Culling decisions and the sample
    count are treated as piecewise-constant.
    """
    batch = render_batch(grid, ray.origin, ray.dir, cfg)
    return backward_batch(grid, batch, np.asarray(d_color, np.float64),
                          cfg, buf=buf)


def _param_views(grid: VoxelGrid):
    return {"delta": grid.delta, "sigma_alpha": grid.sigma_alpha, "sh": grid.sh}


def fd_check(grid: VoxelGrid, loss_and_grad, subset_size: int = 200,
             h: float = 1e-4, seed: int = 0, min_grad: float = 1e-8):
    """Central-difference verification of an analytic gradient.

    loss_and_grad(grid) must return (scalar loss, GradBuffer) and be
    deterministic.  A random subset of parameters is perturbed by +-h; the
    report lists entries sorted by relative error (worst first) and is
    restricted to parameters whose analytic gradient magnitude exceeds
    min_grad.
    """
    _, gbuf = loss_and_grad(grid)
    grads = {"delta": gbuf.d_delta, "sigma_alpha": gbuf.d_sigma_alpha, "sh": gbuf.d_sh}
    rng = np.random.default_rng(seed)
    names = []
    for name, arr in _param_views(grid).items():
        for flat in range(arr.size):
            names.append((name, flat))
    idx = rng.choice(len(names), size=min(subset_size, len(names)), replace=False)
    entries = []
    for q in idx:
        name, flat = names[int(q)]
        arr = _param_views(grid)[name]
        orig = arr.flat[flat]
        arr.flat[flat] = orig + h
        lp, _ = loss_and_grad(grid)
        arr.flat[flat] = orig - h
        lm, _ = loss_and_grad(grid)
        arr.flat[flat] = orig
        fd = (lp - lm) / (2.0 * h)
        an = grads[name].flat[flat]
        if abs(an) <= min_grad and abs(fd) <= min_grad:
            continue
        rel = abs(an - fd) / max(abs(an), abs(fd), min_grad)
        entries.append({"param": f"{name}[{flat}]", "analytic": float(an),
                        "fd": float(fd), "rel_err": float(rel)})
    entries.sort(key=lambda e: -e["rel_err"])
    return {
        "max_rel_err": entries[0]["rel_err"] if entries else 0.0,
        "worst_param": entries[0]["param"] if entries else None,
        "entries": entries,
    }
