"""The optimization loop: RMSProp over the three parameter groups with
delayed-exponential learning-rate schedules, truncation annealing, the
convergence-loss cutoff, and periodic checkpointing."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import NonFiniteLossError
from .field import VoxelGrid
from .loss import LossWeights, RayBatch, total_loss
from .render import RenderConfig
from .scene import Dataset, camera_rays

METRIC_FIELDS = ("iter", "photometric", "convergence", "normal", "tv",
                 "entropy", "sparsity", "total", "lr_delta", "lr_sigma", "a")


@dataclass
class TrainConfig:
    iters: int = 50000
    batch_rays: int = 5000
    lr_delta_start: float = 1e-5
    lr_delta_end: float = 1e-5
    lr_sigma_start: float = 1e-2
    lr_sigma_end: float = 1e-3
    lr_sh: float = 1e-3          # constant: no decay, no delay
    delay_iters: int = 25000
    delay_mult: float = 0.01
    a_start: float = 5.0
    a_end: float = 2.0
    a_anneal_iters: int = 10000
    rmsprop_decay: float = 0.95
    rmsprop_eps: float = 1e-8
    seed: int = 0
    weights: LossWeights = dc_field(default_factory=LossWeights)
    cull_backfaces: bool = True
    deterministic: bool = True
    log_every: int = 100
    checkpoint_every: int = 0    # 0 = final checkpoint only


@dataclass
class OptimizerState:
    """Per-parameter-array RMSProp second-moment accumulators."""

    v_delta: np.ndarray
    v_sigma_alpha: np.ndarray
    v_sh: np.ndarray
    iteration: int = 0

    @classmethod
    def zeros_like(cls, grid: VoxelGrid) -> "OptimizerState":
        return cls(v_delta=np.zeros_like(grid.delta),
                   v_sigma_alpha=np.zeros_like(grid.sigma_alpha),
                   v_sh=np.zeros_like(grid.sh))


def lr_schedule(step: int, lr_start: float, lr_end: float, total: int,
                delay_iters: int = 0, delay_mult: float = 1.0) -> float:
    """Delayed-exponential schedule: log-linear interpolation from lr_start
    to lr_end, scaled by delay_mult + (1-delay_mult)*sin(pi/2 * s/delay)
    during the delay window."""
    t = min(max(step / total, 0.0), 1.0) if total > 0 else 1.0
    lr = float(np.exp((1.0 - t) * np.log(lr_start) + t * np.log(lr_end)))
    if delay_iters > 0:
        ramp = min(step / delay_iters, 1.0)
        lr *= delay_mult + (1.0 - delay_mult) * np.sin(0.5 * np.pi * ramp)
    return lr


def anneal_a(step: int, a_start: float = 5.0, a_end: float = 2.0,
             anneal_iters: int = 10000) -> float:
    """Linear decay of the truncation parameter, clamped at a_end."""
    if anneal_iters <= 0:
        return a_end
    t = min(step / anneal_iters, 1.0)
    return a_start + (a_end - a_start) * t


def rmsprop_step(params: np.ndarray, grads: np.ndarray, v: np.ndarray,
                 lr: float, decay: float = 0.95, eps: float = 1e-8):
    """In-place RMSProp update: v <- decay*v + (1-decay)*g^2;
    p <- p - lr*g/(sqrt(v)+eps)."""
    v *= decay
    v += (1.0 - decay) * grads * grads
    params -= lr * grads / (np.sqrt(v) + eps)


def _gather_rays(dataset: Dataset):
    origins, dirs, gts = [], [], []
    for cam, img in zip(dataset.cameras, dataset.images):
        o, d = camera_rays(cam)
        origins.append(o)
        dirs.append(d)
        gts.append(img.reshape(-1, 3))
    return np.concatenate(origins), np.concatenate(dirs), np.concatenate(gts)


def train(grid: VoxelGrid, dataset: Dataset, cfg: TrainConfig,
          out_ckpt=None, metrics_csv=None):
    """Optimize the surface grid against the dataset.  Returns (grid, metrics).

    Every iteration samples batch_rays pixel rays uniformly over all images
    (seeded, with replacement), renders with the annealed truncation
    parameter, backpropagates the full objective, and applies per-group
    RMSProp with the per-group schedules.  Metrics rows are appended every
    log_every iterations and at the last one; checkpoints are written every
    checkpoint_every iterations (when out_ckpt is set) and at the end.
    """
    from .checkpoint import save_surface
    from .report import write_metrics_csv

    metrics: list[dict] = []
    if cfg.iters <= 0:
        if out_ckpt is not None:
            save_surface(grid, out_ckpt)
        if metrics_csv is not None:
            write_metrics_csv(metrics_csv, metrics, METRIC_FIELDS)
        return grid, metrics

    origins, dirs, gts = _gather_rays(dataset)
    n_pixels = origins.shape[0]
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState.zeros_like(grid)
    render_cfg = RenderConfig(a=cfg.a_start, background=dataset.background,
                              cull_backfaces=cfg.cull_backfaces)

    for step in range(cfg.iters):
        idx = rng.integers(0, n_pixels, cfg.batch_rays)
        render_cfg.a = anneal_a(step, cfg.a_start, cfg.a_end, cfg.a_anneal_iters)
        batch = RayBatch(origins=origins[idx], dirs=dirs[idx], gt_colors=gts[idx])
        loss_rng = np.random.default_rng([cfg.seed, step])
        total, gbuf, terms = total_loss(batch, grid, cfg.weights, step,
                                        render_cfg, rng=loss_rng,
                                        deterministic=cfg.deterministic)
        if not np.isfinite(total):
            raise NonFiniteLossError(step, terms)

        lr_delta = lr_schedule(step, cfg.lr_delta_start, cfg.lr_delta_end,
                               cfg.iters, cfg.delay_iters, cfg.delay_mult)
        lr_sigma = lr_schedule(step, cfg.lr_sigma_start, cfg.lr_sigma_end,
                               cfg.iters, cfg.delay_iters, cfg.delay_mult)
        rmsprop_step(grid.delta, gbuf.d_delta, state.v_delta,
                     lr_delta, cfg.rmsprop_decay, cfg.rmsprop_eps)
        rmsprop_step(grid.sigma_alpha, gbuf.d_sigma_alpha, state.v_sigma_alpha,
                     lr_sigma, cfg.rmsprop_decay, cfg.rmsprop_eps)
        rmsprop_step(grid.sh, gbuf.d_sh, state.v_sh,
                     cfg.lr_sh, cfg.rmsprop_decay, cfg.rmsprop_eps)
        state.iteration = step + 1

        if step % cfg.log_every == 0 or step == cfg.iters - 1:
            if not (np.all(np.isfinite(grid.delta))
                    and np.all(np.isfinite(grid.sigma_alpha))
                    and np.all(np.isfinite(grid.sh))):
                raise NonFiniteLossError(step, terms)
            metrics.append({
                "iter": step,
                "photometric": terms["photometric"],
                "convergence": terms["convergence"],
                "normal": terms["normal"],
                "tv": terms["tv"],
                "entropy": terms["entropy"],
                "sparsity": terms["sparsity"],
                "total": terms["total"],
                "lr_delta": lr_delta,
                "lr_sigma": lr_sigma,
                "a": render_cfg.a,
            })
        if (out_ckpt is not None and cfg.checkpoint_every > 0
                and step % cfg.checkpoint_every == 0 and step > 0):
            save_surface(grid, out_ckpt)

    if out_ckpt is not None:
        save_surface(grid, out_ckpt)
    if metrics_csv is not None:
        write_metrics_csv(metrics_csv, metrics, METRIC_FIELDS)
    return grid, metrics
