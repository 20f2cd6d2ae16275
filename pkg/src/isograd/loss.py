"""Photometric objective and surface/opacity regularizers, with analytic
gradients routed through the rendering adjoint and direct vertex-space
adjoints for the field terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import FD_BASE_RES, VoxelGrid, vertex_mask
from .grad import GradBuffer, backward_batch
from .render import BatchRender, RaySamples, RenderConfig, render_batch

ENTROPY_WEIGHT_FLOOR = 1e-12
CONVERGENCE_GATE = 1e-8


@dataclass
class LossWeights:
    """Regularizer weights; defaults reproduce the training recipe."""

    lambda_c: float = 1e-6
    lambda_n: float = 1e-6
    lambda_delta: float = 1e-3
    lambda_H: float = 1e-4
    lambda_alpha: float = 1e-9
    lambda_ek: float = 0.0
    lambda_c_cutoff_iters: int = 10000


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    gt_colors: np.ndarray


def photometric(pred, gt) -> float:
    """Squared L2 color error over channels."""
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    return float(np.sum((pred - gt) ** 2))


def convergence_loss(samples: RaySamples) -> float:
    """Sum of |depth_mode - t_i| over samples with non-trivial truncated
    opacity; pulls the level sets toward a common depth."""
    if not samples.intersections:
        return 0.0
    t = np.array([i.t for i in samples.intersections])
    gate = samples.alpha_trunc > CONVERGENCE_GATE
    return float(np.sum(np.abs(samples.depth_mode - t) * gate))


def entropy_loss(samples: RaySamples) -> float:
    """Weight entropy -sum w log w over normalized rendering weights."""
    return _entropy_from_weights(samples.weights)


def _entropy_from_weights(w: np.ndarray) -> float:
    s = float(np.sum(w))
    if s < ENTROPY_WEIGHT_FLOOR:
        return 0.0
    wb = w[w > 0.0] / s
    return float(-np.sum(wb * np.log(wb)))


# ---------------------------------------------------------------------------
# field-level regularizers (evaluated once per optimization step)
# ---------------------------------------------------------------------------

def _pair_masks(mask: np.ndarray):
    """Per-axis flags marking forward differences whose both endpoints are
    vertices of non-pruned voxels; +boundary entries stay False (Neumann)."""
    pm = np.zeros(mask.shape + (3,), bool)
    pm[:-1, :, :, 0] = mask[:-1, :, :] & mask[1:, :, :]
    pm[:, :-1, :, 1] = mask[:, :-1, :] & mask[:, 1:, :]
    pm[:, :, :-1, 2] = mask[:, :, :-1] & mask[:, :, 1:]
    return pm


def _forward_diffs(values: np.ndarray, pm: np.ndarray, scales) -> np.ndarray:
    """Masked forward differences of a vertex field, scaled per axis.

    Works for scalar fields (X,Y,Z) and vector fields (X,Y,Z,C); the
    difference axis is appended last.
    """
    out = np.zeros(values.shape + (3,), np.float64)
    out[:-1, ..., 0] = values[1:] - values[:-1]
    out[:, :-1, ..., 1] = values[:, 1:] - values[:, :-1]
    out[:, :, :-1, ..., 2] = values[:, :, 1:] - values[:, :, :-1]
    out *= pm[:, :, :, None, :] if values.ndim == 4 else pm
    for a in range(3):
        out[..., a] *= scales[a]
    return out


def _forward_diffs_transpose(cot: np.ndarray, pm: np.ndarray, scales) -> np.ndarray:
    """Adjoint of _forward_diffs back onto the vertex field."""
    d = cot.copy()
    for a in range(3):
        d[..., a] *= scales[a]
    d *= pm[:, :, :, None, :] if cot.ndim == 5 else pm
    out = np.zeros(cot.shape[:-1], np.float64)
    out[1:] += d[:-1, ..., 0]
    out[:-1] -= d[:-1, ..., 0]
    out[:, 1:] += d[:, :-1, ..., 1]
    out[:, :-1] -= d[:, :-1, ..., 1]
    out[:, :, 1:] += d[:, :, :-1, ..., 2]
    out[:, :, :-1] -= d[:, :, :-1, ..., 2]
    return out


def _tv_scales(resolution):
    return np.asarray(resolution, np.float64) / FD_BASE_RES


def tv_loss(grid: VoxelGrid) -> float:
    return _tv_loss_grad(grid)[0]


def _tv_loss_grad(grid: VoxelGrid):
    """Mean Euclidean norm of the scaled forward differences of the surface
    scalar over vertices of non-pruned voxels, with its gradient."""
    mask = vertex_mask(grid.occupancy)
    nv = int(mask.sum())
    grad = np.zeros_like(grid.delta)
    if nv == 0:
        return 0.0, grad
    pm = _pair_masks(mask)
    scales = _tv_scales(grid.resolution)
    d = _forward_diffs(grid.delta, pm, scales)
    norms = np.sqrt(np.sum(d * d, axis=-1))
    loss = float(norms[mask].sum() / nv)
    inv = np.zeros_like(norms)
    nz = (norms > 0.0) & mask
    inv[nz] = 1.0 / norms[nz]
    cot = d * inv[..., None] / nv
    grad = _forward_diffs_transpose(cot, pm, scales)
    return loss, grad


def normal_smoothness(grid: VoxelGrid) -> float:
    return _normal_smoothness_grad(grid)[0]


def _normal_smoothness_grad(grid: VoxelGrid):
    """Mean L1 norm of forward differences of vertex normals, and its
    gradient w.r.t. the surface scalars.

    Vertex normals are -g/|g| of the scaled finite-difference gradient;
    zero-gradient vertices contribute the zero normal.  Applied over all
    vertices of non-pruned voxels whether or not a surface crosses them.
    """
    mask = vertex_mask(grid.occupancy)
    nv = int(mask.sum())
    if nv == 0:
        return 0.0, np.zeros_like(grid.delta)
    pm = _pair_masks(mask)
    scales = _tv_scales(grid.resolution)
    g = _forward_diffs(grid.delta, pm, scales)          # (X,Y,Z,3)
    r = np.sqrt(np.sum(g * g, axis=-1))
    ok = r > 0.0
    n = np.zeros_like(g)
    n[ok] = -g[ok] / r[ok][..., None]

    dn = _forward_diffs(n, pm, scales)                  # (X,Y,Z,3,3): [comp, axis]
    loss = float(np.abs(dn)[mask].sum() / nv)

    cot_dn = np.sign(dn)
    cot_dn[~mask] = 0.0
    cot_n = _forward_diffs_transpose(cot_dn, pm, scales) / nv   # (X,Y,Z,3)

    # dn/dg = -(I - g_hat g_hat^T)/r
    cot_g = np.zeros_like(g)
    ghat = np.zeros_like(g)
    ghat[ok] = g[ok] / r[ok][..., None]
    dot = np.sum(cot_n * ghat, axis=-1)
    cot_g[ok] = -(cot_n[ok] - dot[ok][..., None] * ghat[ok]) / r[ok][..., None]
    grad = _forward_diffs_transpose(cot_g, pm, scales)
    return loss, grad


def eikonal_loss(grid: VoxelGrid) -> float:
    return _eikonal_loss_grad(grid)[0]


def _eikonal_loss_grad(grid: VoxelGrid):
    """Mean squared deviation of the world-space finite-difference gradient
    norm from 1 (ablation regularizer, off by default).

    Averaged over vertices whose three forward neighbours all exist within
    non-pruned voxels, so a globally linear unit-slope field scores exactly 0.
    """
    mask = vertex_mask(grid.occupancy)
    pm = _pair_masks(mask)
    interior = pm.all(axis=-1)
    nv = int(interior.sum())
    if nv == 0:
        return 0.0, np.zeros_like(grid.delta)
    scales = 1.0 / grid.voxel_size
    g = _forward_diffs(grid.delta, pm, scales)
    r = np.sqrt(np.sum(g * g, axis=-1))
    dev = np.where(interior, r - 1.0, 0.0)
    loss = float(np.sum(dev * dev) / nv)
    cot_r = 2.0 * dev / nv
    cot_g = np.zeros_like(g)
    ok = (r > 0.0) & interior
    cot_g[ok] = cot_r[ok][..., None] * g[ok] / r[ok][..., None]
    grad = _forward_diffs_transpose(cot_g, pm, scales)
    return loss, grad


def sparsity_loss(grid: VoxelGrid, sample_fraction: float = 0.10,
                  rng: np.random.Generator | None = None) -> float:
    return _sparsity_loss_grad(grid, sample_fraction, rng)[0]


def _sample_voxel_vertices(grid: VoxelGrid, sample_fraction: float,
                           rng: np.random.Generator | None):
    """Unique vertices of a uniform sample of the existing (non-pruned)
    voxels; the subset is redrawn every call from the given rng."""
    if rng is None:
        rng = np.random.default_rng(0)
    occ_idx = np.argwhere(grid.occupancy != 0)
    if occ_idx.shape[0] == 0:
        return None
    n_pick = max(1, int(round(sample_fraction * occ_idx.shape[0])))
    pick = occ_idx[rng.choice(occ_idx.shape[0], size=n_pick, replace=False)]
    sel = np.zeros((grid.resolution[0] + 1, grid.resolution[1] + 1,
                    grid.resolution[2] + 1), bool)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                sel[pick[:, 0] + dx, pick[:, 1] + dy, pick[:, 2] + dz] = True
    return sel


def _sparsity_loss_grad(grid: VoxelGrid, sample_fraction: float = 0.10,
                        rng: np.random.Generator | None = None):
    """Mean relu(sigma_alpha) over vertices of the sampled voxel subset."""
    sel = _sample_voxel_vertices(grid, sample_fraction, rng)
    grad = np.zeros_like(grid.sigma_alpha)
    if sel is None:
        return 0.0, grad
    nv = int(sel.sum())
    vals = grid.sigma_alpha[sel]
    loss = float(np.sum(np.maximum(vals, 0.0)) / nv)
    grad[sel] = (grid.sigma_alpha[sel] > 0.0) / nv
    return loss, grad


# ---------------------------------------------------------------------------
# batched per-ray terms and the total objective
# ---------------------------------------------------------------------------

def _per_ray_terms(batch: BatchRender):
    """Vectorized convergence and entropy terms per ray from the tape."""
    w, _, _ = batch.weights()
    n, cap = w.shape
    valid = np.arange(cap)[None, :] < batch.counts[:, None]
    s = w.sum(axis=1)
    # entropy
    ent = np.zeros(n)
    nz = s >= ENTROPY_WEIGHT_FLOOR
    with np.errstate(divide="ignore", invalid="ignore"):
        wb = np.where(w > 0.0, w / np.maximum(s[:, None], ENTROPY_WEIGHT_FLOOR), 1.0)
        ent_terms = np.where(w > 0.0, -wb * np.log(wb), 0.0)
    ent[nz] = ent_terms[nz].sum(axis=1)
    # convergence: depth of max-weight sample, gated on alpha* > 1e-8
    conv = np.zeros(n)
    has = batch.counts > 0
    imax = np.argmax(w, axis=1)
    t_tilde = batch.tape["t"][np.arange(n), imax]
    gate = (batch.tape["astar"] > CONVERGENCE_GATE) & valid
    conv[has] = (np.abs(t_tilde[:, None] - batch.tape["t"]) * gate).sum(axis=1)[has]
    return conv, ent


def total_loss(rays: RayBatch, grid: VoxelGrid, weights: LossWeights,
               iteration: int, cfg: RenderConfig,
               rng: np.random.Generator | None = None,
               deterministic: bool = True):
    """Full objective over a ray batch: mean per-ray terms plus the field
    terms added once per step.

    Returns (total, GradBuffer, terms) where terms maps each component name
    to its unweighted value.  The convergence weight is zeroed from
    lambda_c_cutoff_iters onward.  The sparsity subset is drawn from rng
    (seeded by the iteration when omitted) so a fixed iteration yields a
    deterministic loss.
    """
    if rng is None:
        rng = np.random.default_rng(iteration)
    n = rays.origins.shape[0]
    lam_c = weights.lambda_c if iteration < weights.lambda_c_cutoff_iters else 0.0

    batch = render_batch(grid, rays.origins, rays.dirs, cfg)
    err = batch.colors - rays.gt_colors
    photo = float(np.sum(err * err) / n)
    conv, ent = _per_ray_terms(batch)
    conv_mean = float(conv.mean())
    ent_mean = float(ent.mean())

    buf = GradBuffer.zeros_like(grid)
    d_colors = 2.0 * err / n
    backward_batch(grid, batch, d_colors, cfg,
                   lam_conv=lam_c / n, lam_ent=weights.lambda_H / n,
                   buf=buf, deterministic=deterministic)

    tv_val, tv_grad = _tv_loss_grad(grid)
    ns_val, ns_grad = _normal_smoothness_grad(grid)
    sp_val, sp_grad = _sparsity_loss_grad(grid, rng=rng)
    buf.d_delta += weights.lambda_delta * tv_grad
    buf.d_delta += weights.lambda_n * ns_grad
    buf.d_sigma_alpha += weights.lambda_alpha * sp_grad

    terms = {
        "photometric": photo,
        "convergence": conv_mean,
        "normal": ns_val,
        "tv": tv_val,
        "entropy": ent_mean,
        "sparsity": sp_val,
    }
    total = (photo + lam_c * conv_mean + weights.lambda_H * ent_mean
             + weights.lambda_n * ns_val + weights.lambda_delta * tv_val
             + weights.lambda_alpha * sp_val)
    if weights.lambda_ek > 0.0:
        ek_val, ek_grad = _eikonal_loss_grad(grid)
        buf.d_delta += weights.lambda_ek * ek_grad
        terms["eikonal"] = ek_val
        total += weights.lambda_ek * ek_val
    terms["total"] = total
    return total, buf, terms
