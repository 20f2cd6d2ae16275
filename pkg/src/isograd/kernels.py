"""Numba-compiled numerical core.

Everything ray-hot lives here: trilinear field evaluation, spherical
harmonics, closed-form cubic root solving, voxel traversal, the fused
forward renderer with its per-sample tape, the hand-written adjoint
(backward) kernels, stratified volume rendering for the density fit, and
the dense virtual-ray surface extractor.

Vertex ordering of the 8 voxel corners is fixed once: corner index
m = 4*cx + 2*cy + cz for offsets (cx, cy, cz) in {0,1}^3, i.e. corners
1..8 in the usual trilinear expansion written with x outermost and z
innermost.  All intersection math happens in grid index space, where
voxels are unit cubes; the ray parameter t is shared with world space
because the index transform is affine per axis.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange, get_thread_id, get_num_threads

# Real SH constants, degree <= 2 (9 basis functions).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2_0 = 1.0925484305920792
SH_C2_1 = 0.31539156525252005
SH_C2_2 = 0.5462742152960396

# Numerical policy (64-bit throughout):
CUBIC_REL_EPS = 1e-12     # degenerate-coefficient ladder threshold, relative
ROOT_RANGE_TOL = 1e-9     # root-in-segment tolerance on t'
ROOT_DEDUP_REL = 1e-7     # in-voxel duplicate-root tolerance, relative to span
FACE_DEDUP_TOL = 1e-7     # cross-voxel duplicate tolerance on global t
DEGEN_NORMAL_EPS = 1e-12  # world-space gradient norm below which a normal is degenerate
ROOT_GRAD_EPS = 1e-8      # |P'| threshold (times coefficient scale) for tangential hits


# ---------------------------------------------------------------------------
# scalar field math
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _fetch_corners(arr, vi, vj, vk, out):
    out[0] = arr[vi, vj, vk]
    out[1] = arr[vi, vj, vk + 1]
    out[2] = arr[vi, vj + 1, vk]
    out[3] = arr[vi, vj + 1, vk + 1]
    out[4] = arr[vi + 1, vj, vk]
    out[5] = arr[vi + 1, vj, vk + 1]
    out[6] = arr[vi + 1, vj + 1, vk]
    out[7] = arr[vi + 1, vj + 1, vk + 1]


@njit(cache=True, inline="always")
def _fetch_corners_sh(sh, vi, vj, vk, c, out):
    out[0] = sh[vi, vj, vk, c]
    out[1] = sh[vi, vj, vk + 1, c]
    out[2] = sh[vi, vj + 1, vk, c]
    out[3] = sh[vi, vj + 1, vk + 1, c]
    out[4] = sh[vi + 1, vj, vk, c]
    out[5] = sh[vi + 1, vj, vk + 1, c]
    out[6] = sh[vi + 1, vj + 1, vk, c]
    out[7] = sh[vi + 1, vj + 1, vk + 1, c]


@njit(cache=True, inline="always")
def _trilinear(c, x, y, z):
    lo = ((c[0] * (1.0 - z) + c[1] * z) * (1.0 - y)
          + (c[2] * (1.0 - z) + c[3] * z) * y)
    hi = ((c[4] * (1.0 - z) + c[5] * z) * (1.0 - y)
          + (c[6] * (1.0 - z) + c[7] * z) * y)
    return lo * (1.0 - x) + hi * x


@njit(cache=True, inline="always")
def _trilinear_weights(x, y, z, out):
    out[0] = (1.0 - x) * (1.0 - y) * (1.0 - z)
    out[1] = (1.0 - x) * (1.0 - y) * z
    out[2] = (1.0 - x) * y * (1.0 - z)
    out[3] = (1.0 - x) * y * z
    out[4] = x * (1.0 - y) * (1.0 - z)
    out[5] = x * (1.0 - y) * z
    out[6] = x * y * (1.0 - z)
    out[7] = x * y * z


@njit(cache=True, inline="always")
def _trilinear_grad(c, x, y, z, g):
    """Gradient of the trilinear blend w.r.t. the local coordinates."""
    lo = ((c[0] * (1.0 - z) + c[1] * z) * (1.0 - y)
          + (c[2] * (1.0 - z) + c[3] * z) * y)
    hi = ((c[4] * (1.0 - z) + c[5] * z) * (1.0 - y)
          + (c[6] * (1.0 - z) + c[7] * z) * y)
    g[0] = hi - lo
    g[1] = (((c[2] * (1.0 - z) + c[3] * z) - (c[0] * (1.0 - z) + c[1] * z)) * (1.0 - x)
            + ((c[6] * (1.0 - z) + c[7] * z) - (c[4] * (1.0 - z) + c[5] * z)) * x)
    g[2] = (((c[1] - c[0]) * (1.0 - y) + (c[3] - c[2]) * y) * (1.0 - x)
            + ((c[5] - c[4]) * (1.0 - y) + (c[7] - c[6]) * y) * x)


@njit(cache=True)
def _sh_basis(dx, dy, dz, out):
    out[0] = SH_C0
    out[1] = -SH_C1 * dy
    out[2] = SH_C1 * dz
    out[3] = -SH_C1 * dx
    out[4] = SH_C2_0 * dx * dy
    out[5] = -SH_C2_0 * dy * dz
    out[6] = SH_C2_1 * (3.0 * dz * dz - 1.0)
    out[7] = -SH_C2_0 * dx * dz
    out[8] = SH_C2_2 * (dx * dx - dy * dy)


# ---------------------------------------------------------------------------
# cubic polynomial: coefficients along a ray, closed-form roots
# ---------------------------------------------------------------------------

@njit(cache=True)
def _cubic_coeffs(c, ox, oy, oz, dx, dy, dz, f):
    """Coefficients of trilinear(c, o' + t' d) as f3 t'^3 + f2 t'^2 + f1 t' + f0.

    Uses the m/k/h factoring: m couples the z pairs at the shifted origin,
    k carries the mixed y/z linear terms, h the y*z quadratic terms.
    """
    m00 = c[0] * (1.0 - oz) + c[1] * oz
    m01 = c[2] * (1.0 - oz) + c[3] * oz
    m10 = c[4] * (1.0 - oz) + c[5] * oz
    m11 = c[6] * (1.0 - oz) + c[7] * oz
    k0 = ((m01 * dy + dz * (c[3] - c[2]) * oy)
          - (m00 * dy - dz * (c[1] - c[0]) * (1.0 - oy)))
    k1 = ((m11 * dy + dz * (c[7] - c[6]) * oy)
          - (m10 * dy - dz * (c[5] - c[4]) * (1.0 - oy)))
    h0 = dy * dz * (c[3] - c[2]) - dy * dz * (c[1] - c[0])
    h1 = dy * dz * (c[7] - c[6]) - dy * dz * (c[5] - c[4])
    a0 = m00 * (1.0 - oy) + m01 * oy
    a1 = m10 * (1.0 - oy) + m11 * oy
    f[3] = h1 * dx - h0 * dx
    f[2] = k1 * dx + h1 * ox - k0 * dx + h0 * (1.0 - ox)
    f[1] = a1 * dx + k1 * ox - a0 * dx + k0 * (1.0 - ox)
    f[0] = a0 * (1.0 - ox) + a1 * ox


@njit(cache=True)
def _cubic_roots(f3, f2, f1, f0, out):
    """All real roots of f3 t^3 + f2 t^2 + f1 t + f0 = 0, ascending.

    Returns (count, all_roots).  all_roots is True for the identically-zero
    polynomial (every t is a root); count is 0 then.  Degenerate leading
    coefficients fall through cubic -> quadratic -> linear -> constant with
    a relative threshold, since an axis-aligned-linear field along the ray
    produces f3 = 0 exactly.
    """
    scale = max(abs(f3), abs(f2), abs(f1), abs(f0))
    if scale == 0.0:
        return 0, True
    eps = CUBIC_REL_EPS * scale

    if abs(f3) >= eps:
        a = f2 / f3
        b = f1 / f3
        c = f0 / f3
        q = (a * a - 3.0 * b) / 9.0
        r = (2.0 * a * a * a - 9.0 * a * b + 27.0 * c) / 54.0
        q3 = q * q * q
        r2 = r * r
        if r2 < q3:
            # three real roots (Vieta's trigonometric branch)
            arg = r / math.sqrt(q3)
            if arg > 1.0:
                arg = 1.0
            elif arg < -1.0:
                arg = -1.0
            theta = math.acos(arg)
            m = -2.0 * math.sqrt(q)
            sh = a / 3.0
            out[0] = m * math.cos(theta / 3.0) - sh
            out[1] = m * math.cos((theta - 2.0 * math.pi) / 3.0) - sh
            out[2] = m * math.cos((theta + 2.0 * math.pi) / 3.0) - sh
            return 3, False
        big = abs(r) + math.sqrt(max(r2 - q3, 0.0))
        aa = -math.copysign(big ** (1.0 / 3.0), r)
        bb = q / aa if aa != 0.0 else 0.0
        out[0] = (aa + bb) - a / 3.0
        return 1, False

    if abs(f2) >= eps:
        disc = f1 * f1 - 4.0 * f2 * f0
        if disc < 0.0:
            return 0, False
        if disc == 0.0:
            out[0] = -f1 / (2.0 * f2)
            return 1, False
        sq = math.sqrt(disc)
        qq = -0.5 * (f1 + math.copysign(sq, f1))
        r0 = qq / f2
        r1 = f0 / qq if qq != 0.0 else -f1 / f2
        if r0 > r1:
            r0, r1 = r1, r0
        out[0] = r0
        out[1] = r1
        return 2, False

    if abs(f1) >= eps:
        out[0] = -f0 / f1
        return 1, False

    # constant polynomial; f0 may be zero only through the relative threshold
    if f0 == 0.0:
        return 0, True
    return 0, False


@njit(cache=True, inline="always")
def _polish_root(f3, f2, f1, f0, t):
    """Up to two guarded Newton steps; keeps the iterate with the smaller residual."""
    for _ in range(2):
        p = ((f3 * t + f2) * t + f1) * t + f0
        dp = (3.0 * f3 * t + 2.0 * f2) * t + f1
        if dp == 0.0:
            break
        t_new = t - p / dp
        p_new = ((f3 * t_new + f2) * t_new + f1) * t_new + f0
        if abs(p_new) < abs(p):
            t = t_new
        else:
            break
    return t


@njit(cache=True)
def _solve_levels_in_voxel(f3, f2, f1, f0, levels, span, tp_out, lvl_out):
    """Roots of the voxel cubic against every level value, kept to [0, span].

    Duplicate roots of one level closer than ROOT_DEDUP_REL*span collapse to
    one; a level filling the whole voxel (identically equal cubic) yields no
    intersections.  Output is sorted by t' across levels.
    """
    n_out = 0
    rng_tol = ROOT_RANGE_TOL * max(1.0, span)
    dedup = ROOT_DEDUP_REL * span
    roots = np.empty(3, np.float64)
    for li in range(levels.shape[0]):
        cnt, all_roots = _cubic_roots(f3, f2, f1, f0 - levels[li], roots)
        if all_roots:
            continue
        prev = -1.0e300
        for q in range(cnt):
            t = _polish_root(f3, f2, f1, f0 - levels[li], roots[q])
            if t < -rng_tol or t > span + rng_tol:
                continue
            if t < 0.0:
                t = 0.0
            elif t > span:
                t = span
            if prev > -1.0e299 and t - prev < dedup:
                continue
            prev = t
            tp_out[n_out] = t
            lvl_out[n_out] = li
            n_out += 1
    # insertion sort by t' (tiny m)
    for i in range(1, n_out):
        tv = tp_out[i]
        lv = lvl_out[i]
        j = i - 1
        while j >= 0 and tp_out[j] > tv:
            tp_out[j + 1] = tp_out[j]
            lvl_out[j + 1] = lvl_out[j]
            j -= 1
        tp_out[j + 1] = tv
        lvl_out[j + 1] = lv
    return n_out


# ---------------------------------------------------------------------------
# ray-box and voxel traversal (index space; voxels are unit cubes)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _ray_aabb(ox, oy, oz, dx, dy, dz, bx0, by0, bz0, bx1, by1, bz1):
    """Slab test against a half-line (t >= 0).

    Returns (hit, t_near, t_far); zero direction components are handled by
    the inside-the-slab test, boxes entirely behind the origin miss, and an
    origin inside the box yields t_near = 0.
    """
    t0 = -np.inf
    t1 = np.inf
    if dx != 0.0:
        ta = (bx0 - ox) / dx
        tb = (bx1 - ox) / dx
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif ox < bx0 or ox > bx1:
        return False, 0.0, 0.0
    if dy != 0.0:
        ta = (by0 - oy) / dy
        tb = (by1 - oy) / dy
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif oy < by0 or oy > by1:
        return False, 0.0, 0.0
    if dz != 0.0:
        ta = (bz0 - oz) / dz
        tb = (bz1 - oz) / dz
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif oz < bz0 or oz > bz1:
        return False, 0.0, 0.0
    if t1 < t0 or t1 < 0.0:
        return False, 0.0, 0.0
    if t0 < 0.0:
        t0 = 0.0
    return True, t0, t1


@njit(cache=True)
def _traverse(occ, ox, oy, oz, dx, dy, dz, out_v, out_t):
    """3D-DDA walk over non-pruned voxels, intervals tiling the in-grid segment.

    out_v is (cap, 3) int64, out_t is (cap, 2) float64; the cap must be at
    least nx+ny+nz+3 which bounds the number of crossed cells.  Interval
    boundaries are shared bit-exactly between neighbouring voxels.
    """
    nx, ny, nz = occ.shape
    hit, t0, t1 = _ray_aabb(ox, oy, oz, dx, dy, dz,
                            0.0, 0.0, 0.0, float(nx), float(ny), float(nz))
    if not hit or t1 <= t0:
        return 0
    # pick the starting voxel from a point nudged inside the segment
    tn = t0 + 1e-10 * (t1 - t0)
    vi = int(math.floor(ox + tn * dx))
    vj = int(math.floor(oy + tn * dy))
    vk = int(math.floor(oz + tn * dz))
    if vi < 0:
        vi = 0
    elif vi > nx - 1:
        vi = nx - 1
    if vj < 0:
        vj = 0
    elif vj > ny - 1:
        vj = ny - 1
    if vk < 0:
        vk = 0
    elif vk > nz - 1:
        vk = nz - 1

    step_x = 1 if dx > 0.0 else (-1 if dx < 0.0 else 0)
    step_y = 1 if dy > 0.0 else (-1 if dy < 0.0 else 0)
    step_z = 1 if dz > 0.0 else (-1 if dz < 0.0 else 0)

    tmax_x = np.inf
    tdel_x = np.inf
    if step_x != 0:
        nxt = float(vi + 1) if step_x > 0 else float(vi)
        tmax_x = (nxt - ox) / dx
        tdel_x = abs(1.0 / dx)
    tmax_y = np.inf
    tdel_y = np.inf
    if step_y != 0:
        nxt = float(vj + 1) if step_y > 0 else float(vj)
        tmax_y = (nxt - oy) / dy
        tdel_y = abs(1.0 / dy)
    tmax_z = np.inf
    tdel_z = np.inf
    if step_z != 0:
        nxt = float(vk + 1) if step_z > 0 else float(vk)
        tmax_z = (nxt - oz) / dz
        tdel_z = abs(1.0 / dz)

    n = 0
    tcur = t0
    while True:
        tnext = tmax_x
        if tmax_y < tnext:
            tnext = tmax_y
        if tmax_z < tnext:
            tnext = tmax_z
        if tnext > t1:
            tnext = t1
        if tnext > tcur and occ[vi, vj, vk] != 0:
            out_v[n, 0] = vi
            out_v[n, 1] = vj
            out_v[n, 2] = vk
            out_t[n, 0] = tcur
            out_t[n, 1] = tnext
            n += 1
        if tnext >= t1:
            break
        tcur = tnext
        if tmax_x <= tmax_y and tmax_x <= tmax_z:
            vi += step_x
            tmax_x += tdel_x
            if vi < 0 or vi >= nx:
                break
        elif tmax_y <= tmax_z:
            vj += step_y
            tmax_y += tdel_y
            if vj < 0 or vj >= ny:
                break
        else:
            vk += step_z
            tmax_z += tdel_z
            if vk < 0 or vk >= nz:
                break
    return n


@njit(cache=True, inline="always")
def _gamma(x, a):
    """Truncation window (1 - cos(pi*clamp(a-x,0,1)))/2."""
    c = a - x
    if c < 0.0:
        c = 0.0
    elif c > 1.0:
        c = 1.0
    return (1.0 - math.cos(math.pi * c)) / 2.0


# ---------------------------------------------------------------------------
# fused surface-rendering forward pass
# ---------------------------------------------------------------------------

@njit(cache=True)
def _forward_one_ray(delta, sig, sh, occ, levels,
                     ogx, ogy, ogz, dgx, dgy, dgz, bx, by, bz,
                     ivs2x, ivs2y, ivs2z, a, bg, cull, cap,
                     vbuf, tbuf,
                     t_vox, t_lvl, t_t, t_tp, t_u, t_sraw, t_alpha, t_astar,
                     t_gamma, t_rgbpre, t_pprime, t_fscale,
                     color):
    """Trace one ray; fills tape rows and the composited color.

    Returns the number of kept (culled-surviving, gamma > 0) samples, which
    may exceed cap; rows past cap are not written and the caller must regrow.
    Collection stops once the truncation window reaches zero, which is exact:
    such samples carry alpha* = 0 and contribute to nothing downstream.
    """
    c8 = np.empty(8, np.float64)
    s8 = np.empty(8, np.float64)
    f = np.empty(4, np.float64)
    g3 = np.empty(3, np.float64)
    basis = np.empty(9, np.float64)
    tp_buf = np.empty(3 * levels.shape[0], np.float64)
    lv_buf = np.empty(3 * levels.shape[0], np.int64)
    _sh_basis(bx, by, bz, basis)

    nvox = _traverse(occ, ogx, ogy, ogz, dgx, dgy, dgz, vbuf, tbuf)
    kept = 0
    transmit = 1.0
    cr = 0.0
    cg = 0.0
    cb = 0.0
    prev_t = -1.0e300
    prev_lvl = -1
    done = False
    for h in range(nvox):
        if done:
            break
        vi = vbuf[h, 0]
        vj = vbuf[h, 1]
        vk = vbuf[h, 2]
        tn = tbuf[h, 0]
        tf = tbuf[h, 1]
        span = tf - tn
        opx = ogx + tn * dgx - vi
        opy = ogy + tn * dgy - vj
        opz = ogz + tn * dgz - vk
        _fetch_corners(delta, vi, vj, vk, c8)
        _cubic_coeffs(c8, opx, opy, opz, dgx, dgy, dgz, f)
        m = _solve_levels_in_voxel(f[3], f[2], f[1], f[0], levels, span, tp_buf, lv_buf)
        for q in range(m):
            tp = tp_buf[q]
            li = lv_buf[q]
            t = tn + tp
            # cross-voxel dedup at shared faces
            if t - prev_t < FACE_DEDUP_TOL and li == prev_lvl:
                continue
            prev_t = t
            prev_lvl = li
            tau = levels[li]
            pprime = (3.0 * f[3] * tp + 2.0 * f[2]) * tp + f[1]
            for_scale = max(abs(f[3]), abs(f[2]), abs(f[1]), abs(f[0] - tau))
            ux = opx + tp * dgx
            uy = opy + tp * dgy
            uz = opz + tp * dgz
            if cull:
                _trilinear_grad(c8, ux, uy, uz, g3)
                gx = g3[0]
                gy = g3[1]
                gz = g3[2]
                gw2 = gx * gx * ivs2x + gy * gy * ivs2y + gz * gz * ivs2z
                degen = gw2 < DEGEN_NORMAL_EPS * DEGEN_NORMAL_EPS
                front = degen or (gx * dgx + gy * dgy + gz * dgz >= 0.0)
                if not front:
                    continue
            gam = _gamma(float(kept), a)
            if gam <= 0.0:
                done = True
                break
            if kept < cap:
                _fetch_corners(sig, vi, vj, vk, s8)
                sraw = _trilinear(s8, ux, uy, uz)
                alpha = 1.0 - math.exp(-sraw) if sraw > 0.0 else 0.0
                astar = gam * alpha
                t_vox[kept, 0] = vi
                t_vox[kept, 1] = vj
                t_vox[kept, 2] = vk
                t_lvl[kept] = li
                t_t[kept] = t
                t_tp[kept] = tp
                t_u[kept, 0] = ux
                t_u[kept, 1] = uy
                t_u[kept, 2] = uz
                t_sraw[kept] = sraw
                t_alpha[kept] = alpha
                t_astar[kept] = astar
                t_gamma[kept] = gam
                t_pprime[kept] = pprime
                t_fscale[kept] = for_scale
                w = transmit * astar
                for ch in range(3):
                    acc = 0.0
                    for k in range(9):
                        _fetch_corners_sh(sh, vi, vj, vk, ch * 9 + k, s8)
                        acc += basis[k] * _trilinear(s8, ux, uy, uz)
                    t_rgbpre[kept, ch] = acc
                    if acc > 0.0:
                        if ch == 0:
                            cr += w * acc
                        elif ch == 1:
                            cg += w * acc
                        else:
                            cb += w * acc
                transmit *= 1.0 - astar
            kept += 1
    color[0] = cr + transmit * bg[0]
    color[1] = cg + transmit * bg[1]
    color[2] = cb + transmit * bg[2]
    return kept


@njit(cache=True)
def render_forward(delta, sig, sh, occ, levels, og, dg, dunit,
                   ivs2, a, bg, cull, cap,
                   t_vox, t_lvl, t_t, t_tp, t_u, t_sraw, t_alpha, t_astar,
                   t_gamma, t_rgbpre, t_pprime, t_fscale,
                   colors, counts):
    """Serial forward renderer over a ray batch.  Returns max kept count."""
    nx, ny, nz = occ.shape
    maxcross = nx + ny + nz + 3
    vbuf = np.empty((maxcross, 3), np.int64)
    tbuf = np.empty((maxcross, 2), np.float64)
    needed = 0
    for r in range(og.shape[0]):
        kept = _forward_one_ray(
            delta, sig, sh, occ, levels,
            og[r, 0], og[r, 1], og[r, 2], dg[r, 0], dg[r, 1], dg[r, 2],
            dunit[r, 0], dunit[r, 1], dunit[r, 2],
            ivs2[0], ivs2[1], ivs2[2], a, bg, cull, cap,
            vbuf, tbuf,
            t_vox[r], t_lvl[r], t_t[r], t_tp[r], t_u[r], t_sraw[r],
            t_alpha[r], t_astar[r], t_gamma[r], t_rgbpre[r], t_pprime[r],
            t_fscale[r], colors[r])
        counts[r] = min(kept, cap)
        if kept > needed:
            needed = kept
    return needed


@njit(cache=True, parallel=True)
def render_forward_par(delta, sig, sh, occ, levels, og, dg, dunit,
                       ivs2, a, bg, cull, cap,
                       t_vox, t_lvl, t_t, t_tp, t_u, t_sraw, t_alpha, t_astar,
                       t_gamma, t_rgbpre, t_pprime, t_fscale,
                       colors, counts, needed_out):
    """Parallel forward renderer; per-ray outputs are disjoint so results are
    bit-identical to the serial driver."""
    nx, ny, nz = occ.shape
    maxcross = nx + ny + nz + 3
    for r in prange(og.shape[0]):
        vbuf = np.empty((maxcross, 3), np.int64)
        tbuf = np.empty((maxcross, 2), np.float64)
        kept = _forward_one_ray(
            delta, sig, sh, occ, levels,
            og[r, 0], og[r, 1], og[r, 2], dg[r, 0], dg[r, 1], dg[r, 2],
            dunit[r, 0], dunit[r, 1], dunit[r, 2],
            ivs2[0], ivs2[1], ivs2[2], a, bg, cull, cap,
            vbuf, tbuf,
            t_vox[r], t_lvl[r], t_t[r], t_tp[r], t_u[r], t_sraw[r],
            t_alpha[r], t_astar[r], t_gamma[r], t_rgbpre[r], t_pprime[r],
            t_fscale[r], colors[r])
        counts[r] = min(kept, cap)
        needed_out[r] = kept


# ---------------------------------------------------------------------------
# hand-written adjoint of the surface renderer
# ---------------------------------------------------------------------------

@njit(cache=True)
def _backward_one_ray(sig, sh,
                      dgx, dgy, dgz, bx, by, bz,
                      cnt, t_vox, t_t, t_u, t_sraw,
                      t_astar, t_gamma, t_rgbpre, t_pprime, t_fscale,
                      dc, bg, lam_conv, lam_ent,
                      d_delta, d_sig, d_sh):
    """Accumulate d(dc.C* + lam_conv*L_conv + lam_ent*L_entropy)/d(params).

    Both gradient paths through every intersection are chained: the direct
    path (alpha and color read at fixed depth) and the geometric path (the
    root depth moving with the 8 surface scalars via implicit
    differentiation), including the effect on later transmittance.
    """
    if cnt == 0:
        return
    basis = np.empty(9, np.float64)
    s8 = np.empty(8, np.float64)
    wts = np.empty(8, np.float64)
    grad3 = np.empty(3, np.float64)
    _sh_basis(bx, by, bz, basis)

    trans = np.empty(cnt, np.float64)
    w = np.empty(cnt, np.float64)
    g_w = np.empty(cnt, np.float64)
    t_run = 1.0
    for i in range(cnt):
        trans[i] = t_run
        w[i] = t_run * t_astar[i]
        t_run *= 1.0 - t_astar[i]
    resid = t_run
    s_w = 0.0
    for i in range(cnt):
        s_w += w[i]

    # depth of the max-weight sample (first max), constant in the adjoint
    imax = 0
    for i in range(1, cnt):
        if w[i] > w[imax]:
            imax = i
    t_tilde = t_t[imax]

    # dL/dw_i: photometric path plus the weight-entropy term
    for i in range(cnt):
        g = 0.0
        for ch in range(3):
            c = t_rgbpre[i, ch]
            if c > 0.0:
                g += dc[ch] * c
        g_w[i] = g
    if lam_ent != 0.0 and s_w > 1e-12:
        ent = 0.0
        for i in range(cnt):
            if w[i] > 0.0:
                wb = w[i] / s_w
                ent -= wb * math.log(wb)
        for i in range(cnt):
            if w[i] > 0.0:
                g_w[i] += lam_ent * (-(math.log(w[i] / s_w) + ent) / s_w)

    dc_bg = dc[0] * bg[0] + dc[1] * bg[1] + dc[2] * bg[2]

    # back-to-front: dL/dalpha*_i = G_i T_i - suffix_i / (1 - alpha*_i)
    suffix = dc_bg * resid
    for i in range(cnt - 1, -1, -1):
        one_m = 1.0 - t_astar[i]
        if one_m > 0.0:
            d_astar = g_w[i] * trans[i] - suffix / one_m
        else:
            d_astar = g_w[i] * trans[i]
        suffix += g_w[i] * w[i]

        vi = t_vox[i, 0]
        vj = t_vox[i, 1]
        vk = t_vox[i, 2]
        ux = t_u[i, 0]
        uy = t_u[i, 1]
        uz = t_u[i, 2]
        _trilinear_weights(ux, uy, uz, wts)

        d_alpha = t_gamma[i] * d_astar
        actp = math.exp(-t_sraw[i]) if t_sraw[i] > 0.0 else 0.0
        d_sraw = d_alpha * actp

        dldt = 0.0
        if lam_conv != 0.0 and t_astar[i] > 1e-8:
            dt = t_t[i] - t_tilde
            if dt > 0.0:
                dldt += lam_conv
            elif dt < 0.0:
                dldt -= lam_conv

        # opacity: direct interpolation path and motion along the ray
        if d_sraw != 0.0:
            _fetch_corners(sig, vi, vj, vk, s8)
            for m in range(8):
                cx = m >> 2
                cy = (m >> 1) & 1
                cz = m & 1
                d_sig[vi + cx, vj + cy, vk + cz] += d_sraw * wts[m]
            _trilinear_grad(s8, ux, uy, uz, grad3)
            dldt += d_sraw * (grad3[0] * dgx + grad3[1] * dgy + grad3[2] * dgz)

        # appearance: SH coefficients and their motion along the ray
        for ch in range(3):
            if t_rgbpre[i, ch] <= 0.0:
                continue
            d_ch = w[i] * dc[ch]
            if d_ch == 0.0:
                continue
            for k in range(9):
                _fetch_corners_sh(sh, vi, vj, vk, ch * 9 + k, s8)
                coef = d_ch * basis[k]
                for m in range(8):
                    cx = m >> 2
                    cy = (m >> 1) & 1
                    cz = m & 1
                    d_sh[vi + cx, vj + cy, vk + cz, ch * 9 + k] += coef * wts[m]
                _trilinear_grad(s8, ux, uy, uz, grad3)
                dldt += coef * (grad3[0] * dgx + grad3[1] * dgy + grad3[2] * dgz)

        # geometric path: depth moves with the surface scalars unless tangent
        if dldt != 0.0:
            pp = t_pprime[i]
            if abs(pp) >= ROOT_GRAD_EPS * max(1.0, t_fscale[i]):
                s = -dldt / pp
                for m in range(8):
                    cx = m >> 2
                    cy = (m >> 1) & 1
                    cz = m & 1
                    d_delta[vi + cx, vj + cy, vk + cz] += s * wts[m]


@njit(cache=True)
def render_backward(sig, sh, dg, dunit,
                    counts, t_vox, t_t, t_u, t_sraw,
                    t_astar, t_gamma, t_rgbpre, t_pprime, t_fscale,
                    dcolors, bg, lam_conv, lam_ent,
                    d_delta, d_sig, d_sh):
    """Deterministic (serial, fixed-order) gradient accumulation."""
    for r in range(dg.shape[0]):
        _backward_one_ray(sig, sh,
                          dg[r, 0], dg[r, 1], dg[r, 2],
                          dunit[r, 0], dunit[r, 1], dunit[r, 2],
                          counts[r], t_vox[r], t_t[r],
                          t_u[r], t_sraw[r], t_astar[r],
                          t_gamma[r], t_rgbpre[r], t_pprime[r], t_fscale[r],
                          dcolors[r], bg, lam_conv, lam_ent,
                          d_delta, d_sig, d_sh)


@njit(cache=True, parallel=True)
def render_backward_par(sig, sh, dg, dunit,
                        counts, t_vox, t_t, t_u, t_sraw,
                        t_astar, t_gamma, t_rgbpre, t_pprime, t_fscale,
                        dcolors, bg, lam_conv, lam_ent,
                        d_delta_tl, d_sig_tl, d_sh_tl):
    """Parallel accumulation into per-thread buffers (reduced by the caller
    in thread order; stable for a fixed thread count)."""
    for r in prange(dg.shape[0]):
        tid = get_thread_id()
        _backward_one_ray(sig, sh,
                          dg[r, 0], dg[r, 1], dg[r, 2],
                          dunit[r, 0], dunit[r, 1], dunit[r, 2],
                          counts[r], t_vox[r], t_t[r],
                          t_u[r], t_sraw[r], t_astar[r],
                          t_gamma[r], t_rgbpre[r], t_pprime[r], t_fscale[r],
                          dcolors[r], bg, lam_conv, lam_ent,
                          d_delta_tl[tid], d_sig_tl[tid], d_sh_tl[tid])


# ---------------------------------------------------------------------------
# stratified volume rendering for the density fit (forward + adjoint)
# ---------------------------------------------------------------------------

@njit(cache=True)
def density_forward(sigma, sh, og, dg, dunit, step_param, dt_world,
                    jitter, bg, colors):
    """Classic stratified volume rendering of a density + SH grid."""
    nx = sigma.shape[0] - 1
    ny = sigma.shape[1] - 1
    nz = sigma.shape[2] - 1
    s8 = np.empty(8, np.float64)
    basis = np.empty(9, np.float64)
    for r in range(og.shape[0]):
        _sh_basis(dunit[r, 0], dunit[r, 1], dunit[r, 2], basis)
        hit, t0, t1 = _ray_aabb(og[r, 0], og[r, 1], og[r, 2],
                                dg[r, 0], dg[r, 1], dg[r, 2],
                                0.0, 0.0, 0.0, float(nx), float(ny), float(nz))
        cr = 0.0
        cg = 0.0
        cb = 0.0
        transmit = 1.0
        if hit and t1 > t0:
            nsteps = int((t1 - t0) / step_param[r])
            if nsteps > jitter.shape[1]:
                nsteps = jitter.shape[1]
            for j in range(nsteps):
                t = t0 + (j + jitter[r, j]) * step_param[r]
                if t >= t1:
                    break
                px = og[r, 0] + t * dg[r, 0]
                py = og[r, 1] + t * dg[r, 1]
                pz = og[r, 2] + t * dg[r, 2]
                vi = min(max(int(math.floor(px)), 0), nx - 1)
                vj = min(max(int(math.floor(py)), 0), ny - 1)
                vk = min(max(int(math.floor(pz)), 0), nz - 1)
                ux = px - vi
                uy = py - vj
                uz = pz - vk
                _fetch_corners(sigma, vi, vj, vk, s8)
                sraw = _trilinear(s8, ux, uy, uz)
                if sraw <= 0.0:
                    continue
                alpha = 1.0 - math.exp(-sraw * dt_world[r])
                wgt = transmit * alpha
                for ch in range(3):
                    acc = 0.0
                    for k in range(9):
                        _fetch_corners_sh(sh, vi, vj, vk, ch * 9 + k, s8)
                        acc += basis[k] * _trilinear(s8, ux, uy, uz)
                    if acc > 0.0:
                        if ch == 0:
                            cr += wgt * acc
                        elif ch == 1:
                            cg += wgt * acc
                        else:
                            cb += wgt * acc
                transmit *= 1.0 - alpha
        colors[r, 0] = cr + transmit * bg[0]
        colors[r, 1] = cg + transmit * bg[1]
        colors[r, 2] = cb + transmit * bg[2]


@njit(cache=True)
def density_fwd_bwd(sigma, sh, og, dg, dunit, step_param, dt_world,
                    jitter, gt, bg, dc_scale, lam_beta, beta_eps,
                    d_sigma, d_sh, colors):
    """Forward render plus adjoint of sum_ch (C - gt)^2 * dc_scale per ray,
    with an optional beta prior lam_beta*(log(eps+T) + log(eps+1-T)) on the
    per-ray residual transmittance (its gradient vanishes at T = 1/2, so it
    only resolves the color/opacity ambiguity, not true semi-transparency).

    Active samples (relu(sigma) > 0) are recorded in a per-ray scratch so the
    adjoint sweep reuses the interpolated values; the suffix identity
    suffix_j = dc . (C - accum_j) removes the need for transmittance storage.
    Both sweeps stop once transmittance underflows 1e-9.
    """
    nx = sigma.shape[0] - 1
    ny = sigma.shape[1] - 1
    nz = sigma.shape[2] - 1
    s8 = np.empty(8, np.float64)
    wts = np.empty(8, np.float64)
    basis = np.empty(9, np.float64)
    max_steps = jitter.shape[1]
    smp_u = np.empty((max_steps, 3), np.float64)
    smp_vox = np.empty((max_steps, 3), np.int64)
    smp_sraw = np.empty(max_steps, np.float64)
    smp_c = np.empty((max_steps, 3), np.float64)
    sq_sum = 0.0
    for r in range(og.shape[0]):
        _sh_basis(dunit[r, 0], dunit[r, 1], dunit[r, 2], basis)
        hit, t0, t1 = _ray_aabb(og[r, 0], og[r, 1], og[r, 2],
                                dg[r, 0], dg[r, 1], dg[r, 2],
                                0.0, 0.0, 0.0, float(nx), float(ny), float(nz))
        cr = 0.0
        cg = 0.0
        cb = 0.0
        transmit = 1.0
        n_act = 0
        if hit and t1 > t0:
            nsteps = min(int((t1 - t0) / step_param[r]), max_steps)
            for j in range(nsteps):
                t = t0 + (j + jitter[r, j]) * step_param[r]
                if t >= t1:
                    break
                px = og[r, 0] + t * dg[r, 0]
                py = og[r, 1] + t * dg[r, 1]
                pz = og[r, 2] + t * dg[r, 2]
                vi = min(max(int(math.floor(px)), 0), nx - 1)
                vj = min(max(int(math.floor(py)), 0), ny - 1)
                vk = min(max(int(math.floor(pz)), 0), nz - 1)
                ux = px - vi
                uy = py - vj
                uz = pz - vk
                _fetch_corners(sigma, vi, vj, vk, s8)
                sraw = _trilinear(s8, ux, uy, uz)
                if sraw <= 0.0:
                    continue
                _trilinear_weights(ux, uy, uz, wts)
                alpha = 1.0 - math.exp(-sraw * dt_world[r])
                wgt = transmit * alpha
                for ch in range(3):
                    acc = 0.0
                    for m in range(8):
                        cx = m >> 2
                        cy = (m >> 1) & 1
                        cz = m & 1
                        w_m = wts[m]
                        base = ch * 9
                        acc += w_m * (
                            basis[0] * sh[vi + cx, vj + cy, vk + cz, base]
                            + basis[1] * sh[vi + cx, vj + cy, vk + cz, base + 1]
                            + basis[2] * sh[vi + cx, vj + cy, vk + cz, base + 2]
                            + basis[3] * sh[vi + cx, vj + cy, vk + cz, base + 3]
                            + basis[4] * sh[vi + cx, vj + cy, vk + cz, base + 4]
                            + basis[5] * sh[vi + cx, vj + cy, vk + cz, base + 5]
                            + basis[6] * sh[vi + cx, vj + cy, vk + cz, base + 6]
                            + basis[7] * sh[vi + cx, vj + cy, vk + cz, base + 7]
                            + basis[8] * sh[vi + cx, vj + cy, vk + cz, base + 8])
                    smp_c[n_act, ch] = acc
                    if acc > 0.0:
                        if ch == 0:
                            cr += wgt * acc
                        elif ch == 1:
                            cg += wgt * acc
                        else:
                            cb += wgt * acc
                smp_u[n_act, 0] = ux
                smp_u[n_act, 1] = uy
                smp_u[n_act, 2] = uz
                smp_vox[n_act, 0] = vi
                smp_vox[n_act, 1] = vj
                smp_vox[n_act, 2] = vk
                smp_sraw[n_act] = sraw
                n_act += 1
                transmit *= 1.0 - alpha
                if transmit < 1e-9:
                    break
        colors[r, 0] = cr + transmit * bg[0]
        colors[r, 1] = cg + transmit * bg[1]
        colors[r, 2] = cb + transmit * bg[2]
        res_t = transmit
        e0 = colors[r, 0] - gt[r, 0]
        e1 = colors[r, 1] - gt[r, 1]
        e2 = colors[r, 2] - gt[r, 2]
        sq_sum += e0 * e0 + e1 * e1 + e2 * e2
        if n_act == 0:
            continue
        dc0 = 2.0 * e0 * dc_scale
        dc1 = 2.0 * e1 * dc_scale
        dc2 = 2.0 * e2 * dc_scale
        # residual-transmittance prior cotangent; chains through every alpha
        dc_t = 0.0
        if lam_beta != 0.0:
            dc_t = lam_beta * (1.0 / (beta_eps + res_t)
                               - 1.0 / (beta_eps + 1.0 - res_t))

        # adjoint sweep over the recorded active samples, front to back
        transmit = 1.0
        ac0 = 0.0
        ac1 = 0.0
        ac2 = 0.0
        for j in range(n_act):
            vi = smp_vox[j, 0]
            vj_ = smp_vox[j, 1]
            vk = smp_vox[j, 2]
            ux = smp_u[j, 0]
            uy = smp_u[j, 1]
            uz = smp_u[j, 2]
            sraw = smp_sraw[j]
            alpha = 1.0 - math.exp(-sraw * dt_world[r])
            wgt = transmit * alpha
            c0 = smp_c[j, 0]
            c1 = smp_c[j, 1]
            c2 = smp_c[j, 2]
            if c0 > 0.0:
                ac0 += wgt * c0
            if c1 > 0.0:
                ac1 += wgt * c1
            if c2 > 0.0:
                ac2 += wgt * c2
            g_w = (dc0 * max(c0, 0.0) + dc1 * max(c1, 0.0) + dc2 * max(c2, 0.0))
            suffix = (dc0 * (colors[r, 0] - ac0)
                      + dc1 * (colors[r, 1] - ac1)
                      + dc2 * (colors[r, 2] - ac2))
            one_m = 1.0 - alpha
            if one_m > 0.0:
                d_alpha = g_w * transmit - suffix / one_m
                if dc_t != 0.0:
                    d_alpha += dc_t * (-res_t / one_m)
            else:
                d_alpha = g_w * transmit
            d_sraw = d_alpha * dt_world[r] * math.exp(-sraw * dt_world[r])
            _trilinear_weights(ux, uy, uz, wts)
            for m in range(8):
                cx = m >> 2
                cy = (m >> 1) & 1
                cz = m & 1
                d_sigma[vi + cx, vj_ + cy, vk + cz] += d_sraw * wts[m]
            for ch in range(3):
                if smp_c[j, ch] <= 0.0:
                    continue
                d_ch = wgt * (dc0 if ch == 0 else (dc1 if ch == 1 else dc2))
                if d_ch == 0.0:
                    continue
                base = ch * 9
                for m in range(8):
                    cx = m >> 2
                    cy = (m >> 1) & 1
                    cz = m & 1
                    coef = d_ch * wts[m]
                    for k in range(9):
                        d_sh[vi + cx, vj_ + cy, vk + cz, base + k] += coef * basis[k]
            transmit *= one_m
    return sq_sum


# ---------------------------------------------------------------------------
# surface point extraction by dense axis-aligned virtual rays
# ---------------------------------------------------------------------------

@njit(cache=True)
def extract_points_fill(delta, sig, occ, levels, k, cap,
                        out_local, out_alpha, out_lvl):
    """Per occupied voxel: k*k rays along each axis through face lattice
    centres; all closed-form level crossings collected with interpolated
    opacity.  out_local holds grid-index-space positions.  Returns the total
    count; rows past cap are counted but not written (caller regrows)."""
    nx, ny, nz = occ.shape
    c8 = np.empty(8, np.float64)
    s8 = np.empty(8, np.float64)
    f = np.empty(4, np.float64)
    tp_buf = np.empty(3 * levels.shape[0] + 3, np.float64)
    lv_buf = np.empty(3 * levels.shape[0] + 3, np.int64)
    n = 0
    for vi in range(nx):
        for vj in range(ny):
            for vk in range(nz):
                if occ[vi, vj, vk] == 0:
                    continue
                _fetch_corners(delta, vi, vj, vk, c8)
                _fetch_corners(sig, vi, vj, vk, s8)
                for axis in range(3):
                    for a1 in range(k):
                        for a2 in range(k):
                            u1 = (a1 + 0.5) / k
                            u2 = (a2 + 0.5) / k
                            if axis == 0:
                                opx, opy, opz = 0.0, u1, u2
                                dx, dy, dz = 1.0, 0.0, 0.0
                            elif axis == 1:
                                opx, opy, opz = u1, 0.0, u2
                                dx, dy, dz = 0.0, 1.0, 0.0
                            else:
                                opx, opy, opz = u1, u2, 0.0
                                dx, dy, dz = 0.0, 0.0, 1.0
                            _cubic_coeffs(c8, opx, opy, opz, dx, dy, dz, f)
                            m = _solve_levels_in_voxel(
                                f[3], f[2], f[1], f[0], levels, 1.0,
                                tp_buf, lv_buf)
                            for q in range(m):
                                tp = tp_buf[q]
                                ux = opx + tp * dx
                                uy = opy + tp * dy
                                uz = opz + tp * dz
                                if n < cap:
                                    out_local[n, 0] = vi + ux
                                    out_local[n, 1] = vj + uy
                                    out_local[n, 2] = vk + uz
                                    sr = _trilinear(s8, ux, uy, uz)
                                    out_alpha[n] = (1.0 - math.exp(-sr)
                                                    if sr > 0.0 else 0.0)
                                    out_lvl[n] = lv_buf[q]
                                n += 1
    return n


@njit(cache=True)
def traverse_fill(occ, ox, oy, oz, dx, dy, dz, out_v, out_t):
    """Python-facing wrapper around the DDA walk (index-space ray)."""
    return _traverse(occ, ox, oy, oz, dx, dy, dz, out_v, out_t)


@njit(cache=True)
def visibility_max_transmittance(sigma, og, dg, step_param, dt_world, max_t):
    """Per-voxel maximum transmittance reached by any of the given rays.

    Voxels whose max stays ~0 are hidden from every ray (enclosed interior);
    max_t has voxel shape and should start at zero.
    """
    nx = sigma.shape[0] - 1
    ny = sigma.shape[1] - 1
    nz = sigma.shape[2] - 1
    s8 = np.empty(8, np.float64)
    for r in range(og.shape[0]):
        hit, t0, t1 = _ray_aabb(og[r, 0], og[r, 1], og[r, 2],
                                dg[r, 0], dg[r, 1], dg[r, 2],
                                0.0, 0.0, 0.0, float(nx), float(ny), float(nz))
        if not hit or t1 <= t0:
            continue
        transmit = 1.0
        nsteps = int((t1 - t0) / step_param[r])
        for j in range(nsteps):
            t = t0 + (j + 0.5) * step_param[r]
            if t >= t1:
                break
            px = og[r, 0] + t * dg[r, 0]
            py = og[r, 1] + t * dg[r, 1]
            pz = og[r, 2] + t * dg[r, 2]
            vi = min(max(int(math.floor(px)), 0), nx - 1)
            vj = min(max(int(math.floor(py)), 0), ny - 1)
            vk = min(max(int(math.floor(pz)), 0), nz - 1)
            if transmit > max_t[vi, vj, vk]:
                max_t[vi, vj, vk] = transmit
            ux = px - vi
            uy = py - vj
            uz = pz - vk
            _fetch_corners(sigma, vi, vj, vk, s8)
            sraw = _trilinear(s8, ux, uy, uz)
            if sraw > 0.0:
                transmit *= math.exp(-sraw * dt_world[r])
                if transmit < 1e-7:
                    break


def thread_buffer_count() -> int:
    return get_num_threads()
