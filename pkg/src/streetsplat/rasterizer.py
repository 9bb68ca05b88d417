"""Differentiable splatting: forward render of color/depth/alpha and the
analytic backward pass for every Gaussian parameter.

Forward pipeline: world->camera transform, SH color, perspective-affine
projection of the 3D covariance (2x3 Jacobian), a 0.3 px^2 low-pass on the
projected covariance diagonal, global front-to-back depth sort with a
stable original-index tie-break, and per-pixel alpha compositing

    C = sum_i c_i a'_i prod_{j<i} (1 - a'_j)

with a'_i = opacity * exp(-0.5 maha), capped at 0.99 for backward
stability and dropped below 1/255. Expected depth composites camera-frame
z with the same weights, normalized by accumulated alpha.

Each Gaussian touches only the pixels inside a square of half-width
r = sqrt(2 ln(255 op) lambda_max) around its projected center; outside it
the Mahalanobis bound guarantees a' < 1/255, so the cull drops exactly the
contributions the compositing definition drops anyway.

Compositing runs through jitted kernels when numba is importable (set
STREETSPLAT_NO_NUMBA=1 to force the pure-numpy pair path; both produce the
same images up to float associativity). The backward pass differentiates
exactly the forward computation; it is checked against central finite
differences in the test suite.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCloudError, MismatchedForwardError
from .gaussians import GaussianCloud, quats_to_rotmats, sh_basis, sh_basis_grad, sh_coeff_count
from .geometry import CameraView

# Contributions in front of this camera-frame depth are discarded.
ZNEAR = 0.01
# Anti-aliasing floor added to the projected covariance diagonal (px^2).
COV2D_LOWPASS = 0.3
# Compositing constants shared with the brute-force oracle.
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
# Projected centers may overshoot the image by this fraction of its extent
# per side before the Gaussian is culled. Footprints large enough to span
# the guard band only arise from the grazing-ray linearization blowup.
FRUSTUM_GUARD = 0.65

try:  # pragma: no cover - exercised implicitly by every render
    if os.environ.get("STREETSPLAT_NO_NUMBA"):
        raise ImportError
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


@dataclass(frozen=True)
class RenderOutput:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters; 0 where alpha == 0
    alpha: np.ndarray  # (H, W) accumulated opacity in [0, 1]
    cache: "RenderCache | None" = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class RenderCache:
    """Depth-sorted per-Gaussian state reused by render_backward."""

    H: int
    W: int
    sh_degree: int
    order: np.ndarray  # (Nv,) original indices, depth-sorted
    pc: np.ndarray  # (Nv, 3) camera-frame means
    u: np.ndarray  # (Nv, 2) projected centers
    cinv: np.ndarray  # (Nv, 3) inverse 2D covariance as (i0, i1, i2)
    bbox: np.ndarray  # (Nv, 4) x0, x1, y0, y1 inclusive pixel bounds
    color: np.ndarray  # (Nv, 3) clamped SH colors
    pre_color: np.ndarray  # (Nv, 3) before clamping
    dirs: np.ndarray  # (Nv, 3) unit view directions
    rho: np.ndarray  # (Nv,) distance camera->mean
    op: np.ndarray  # (Nv,) sigmoid opacities
    t_final: np.ndarray  # (H, W) transmittance left after all splats


@dataclass(frozen=True)
class GradientBuffer:
    """Per-Gaussian partials plus the densification statistics."""

    d_means: np.ndarray
    d_log_scales: np.ndarray
    d_rotations: np.ndarray
    d_opacity_logits: np.ndarray
    d_sh: np.ndarray
    ndc_grad_norm: np.ndarray  # |dL/d(mean in NDC)| per Gaussian
    seen: np.ndarray  # bool; contributed at least one pixel

    @classmethod
    def zeros(cls, n, k):
        return cls(
            np.zeros((n, 3)),
            np.zeros((n, 3)),
            np.zeros((n, 4)),
            np.zeros(n),
            np.zeros((n, k, 3)),
            np.zeros(n),
            np.zeros(n, dtype=bool),
        )


def _sh_colors(cloud: GaussianCloud, cam_center, degree: int):
    means = cloud.means.astype(np.float64)
    delta = means - cam_center
    rho = np.linalg.norm(delta, axis=1)
    safe = rho > 1e-12
    dirs = np.where(safe[:, None], delta / np.where(safe, rho, 1.0)[:, None], [0.0, 0.0, 1.0])
    basis = sh_basis(dirs, degree)
    k = sh_coeff_count(degree)
    coeffs = cloud.sh[:, :k, :].astype(np.float64)
    pre = 0.5 + np.einsum("nk,nkc->nc", basis, coeffs)
    return np.clip(pre, 0.0, 1.0), pre, dirs, rho


def _project_covariances(cloud: GaussianCloud, pc, R_wc, intr):
    """3D covariance -> 2D upper-triangle (a, b, c) via the affine Jacobian."""
    R = quats_to_rotmats(cloud.rotations.astype(np.float64))
    scales = np.exp(cloud.log_scales.astype(np.float64))
    M = R * scales[:, None, :]
    cov3d = M @ M.transpose(0, 2, 1)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    zsafe = np.where(z > 0, z, 1.0)
    J = np.zeros((len(pc), 2, 3))
    J[:, 0, 0] = intr.fx / zsafe
    J[:, 0, 2] = -intr.fx * x / zsafe**2
    J[:, 1, 1] = intr.fy / zsafe
    J[:, 1, 2] = -intr.fy * y / zsafe**2
    T2 = J @ R_wc
    full = T2 @ cov3d @ T2.transpose(0, 2, 1)
    cov2d = np.stack([full[:, 0, 0] + COV2D_LOWPASS, full[:, 0, 1], full[:, 1, 1] + COV2D_LOWPASS], axis=1)
    return cov2d, M, T2, J, cov3d


def _prepare(cloud: GaussianCloud, view: CameraView, H, W, degree):
    """Cull, color, project and depth-sort; everything the kernels need."""
    intr = view.intrinsics
    R_c2w = view.pose.rotmat()
    pc_all = (cloud.means.astype(np.float64) - view.pose.t) @ R_c2w
    # enlarged-frustum cull: besides the near plane, drop Gaussians whose
    # center projects far outside the image (30% guard band per side).
    # Grazing points just past the near plane otherwise get a linearized
    # footprint thousands of pixels wide that washes over the frame.
    zsafe = np.where(pc_all[:, 2] > 0, pc_all[:, 2], 1.0)
    ux = intr.fx * pc_all[:, 0] / zsafe + intr.cx
    uy = intr.fy * pc_all[:, 1] / zsafe + intr.cy
    visible = (
        (pc_all[:, 2] > ZNEAR)
        & (np.abs(ux - (W - 1) / 2.0) <= FRUSTUM_GUARD * W)
        & (np.abs(uy - (H - 1) / 2.0) <= FRUSTUM_GUARD * H)
    )
    if not np.any(visible):
        return None
    vis = np.flatnonzero(visible)
    sub = GaussianCloud(
        cloud.means[vis], cloud.log_scales[vis], cloud.rotations[vis], cloud.opacity_logits[vis], cloud.sh[vis]
    )
    pc = pc_all[vis]
    color, pre_color, dirs, rho = _sh_colors(sub, view.pose.t, degree)
    cov2d, _, _, _, _ = _project_covariances(sub, pc, R_c2w.T, intr)
    z = pc[:, 2]
    u = np.stack([intr.fx * pc[:, 0] / z + intr.cx, intr.fy * pc[:, 1] / z + intr.cy], axis=1)
    op = 1.0 / (1.0 + np.exp(-sub.opacity_logits.astype(np.float64)))

    perm = np.lexsort((vis, z))  # front-to-back, ties by original index
    order = vis[perm]
    pc, u, cov2d, color, pre_color, dirs, rho, op = (
        pc[perm],
        u[perm],
        cov2d[perm],
        color[perm],
        pre_color[perm],
        dirs[perm],
        rho[perm],
        op[perm],
    )

    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    ok = (det > 0) & (op * 255.0 > 1.0)  # opacity so low no pixel can reach 1/255
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    maha_lim = 2.0 * np.log(np.maximum(255.0 * op, 1.0 + 1e-12))
    radius = np.ceil(np.sqrt(maha_lim * np.maximum(lam_max, 0.0)))
    x0 = np.maximum(np.floor(u[:, 0] - radius), 0).astype(np.int64)
    x1 = np.minimum(np.ceil(u[:, 0] + radius), W - 1).astype(np.int64)
    y0 = np.maximum(np.floor(u[:, 1] - radius), 0).astype(np.int64)
    y1 = np.minimum(np.ceil(u[:, 1] + radius), H - 1).astype(np.int64)
    ok &= (x1 >= x0) & (y1 >= y0)
    x0, x1, y0, y1 = (np.where(ok, v, 0) for v in (x0, x1, y0, y1))
    x1 = np.where(ok, x1, -1)  # empty range for culled Gaussians
    cinv = np.stack([c, -b, a], axis=1) / np.where(det > 0, det, 1.0)[:, None]
    bbox = np.stack([x0, x1, y0, y1], axis=1)
    return order, pc, u, cinv, bbox, color, pre_color, dirs, rho, op


@njit(cache=True)
def _forward_kernel(bbox, u, cinv, op, color, z, H, W):
    color_img = np.zeros((H, W, 3))
    depth_raw = np.zeros((H, W))
    acc = np.zeros((H, W))
    trans = np.ones((H, W))
    for i in range(len(op)):
        x0, x1, y0, y1 = bbox[i, 0], bbox[i, 1], bbox[i, 2], bbox[i, 3]
        if x1 < x0:
            continue
        c0, c1, c2 = cinv[i, 0], cinv[i, 1], cinv[i, 2]
        ux, uy = u[i, 0], u[i, 1]
        opi = op[i]
        zi = z[i]
        for py in range(y0, y1 + 1):
            dy = py - uy
            for px in range(x0, x1 + 1):
                dx = px - ux
                maha = c0 * dx * dx + 2.0 * c1 * dx * dy + c2 * dy * dy
                g = math.exp(-0.5 * maha)
                a = opi * g
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                if a < ALPHA_MIN:
                    continue
                T = trans[py, px]
                w = a * T
                color_img[py, px, 0] += w * color[i, 0]
                color_img[py, px, 1] += w * color[i, 1]
                color_img[py, px, 2] += w * color[i, 2]
                depth_raw[py, px] += w * zi
                acc[py, px] += w
                trans[py, px] = T * (1.0 - a)
    return color_img, depth_raw, acc, trans


@njit(cache=True)
def _backward_kernel(bbox, u, cinv, op, color, z, t_final, d_col_img, d_draw_img, d_acc_img):
    n = len(op)
    H, W = t_final.shape
    U = t_final.copy()
    S = np.zeros((H, W))
    d_op = np.zeros(n)
    d_cinv = np.zeros((n, 3))
    d_u = np.zeros((n, 2))
    d_color = np.zeros((n, 3))
    d_z = np.zeros(n)
    seen = np.zeros(n, np.uint8)
    for i in range(n - 1, -1, -1):  # back to front, undoing the transmittance
        x0, x1, y0, y1 = bbox[i, 0], bbox[i, 1], bbox[i, 2], bbox[i, 3]
        if x1 < x0:
            continue
        c0, c1, c2 = cinv[i, 0], cinv[i, 1], cinv[i, 2]
        ux, uy = u[i, 0], u[i, 1]
        opi = op[i]
        zi = z[i]
        for py in range(y0, y1 + 1):
            dy = py - uy
            for px in range(x0, x1 + 1):
                dx = px - ux
                maha = c0 * dx * dx + 2.0 * c1 * dx * dy + c2 * dy * dy
                g = math.exp(-0.5 * maha)
                a = opi * g
                capped = a > ALPHA_MAX
                if capped:
                    a = ALPHA_MAX
                if a < ALPHA_MIN:
                    continue
                seen[i] = 1
                T = U[py, px] / (1.0 - a)
                U[py, px] = T
                w = a * T
                q = (
                    d_col_img[py, px, 0] * color[i, 0]
                    + d_col_img[py, px, 1] * color[i, 1]
                    + d_col_img[py, px, 2] * color[i, 2]
                    + d_draw_img[py, px] * zi
                    + d_acc_img[py, px]
                )
                d_alpha = q * T - S[py, px] / (1.0 - a)
                S[py, px] += q * w
                d_color[i, 0] += w * d_col_img[py, px, 0]
                d_color[i, 1] += w * d_col_img[py, px, 1]
                d_color[i, 2] += w * d_col_img[py, px, 2]
                d_z[i] += w * d_draw_img[py, px]
                if not capped:  # the 0.99 cap gates the falloff gradient
                    d_op[i] += d_alpha * g
                    dg = d_alpha * opi
                    dsig = -0.5 * g * dg
                    d_cinv[i, 0] += dsig * dx * dx
                    d_cinv[i, 1] += dsig * 2.0 * dx * dy
                    d_cinv[i, 2] += dsig * dy * dy
                    d_u[i, 0] += -2.0 * dsig * (c0 * dx + c1 * dy)
                    d_u[i, 1] += -2.0 * dsig * (c1 * dx + c2 * dy)
    return d_op, d_cinv, d_u, d_color, d_z, seen


def _forward_pairs(bbox, u, cinv, op, color, z, H, W):
    """Pure-numpy fallback: explicit pair arrays plus a segmented scan."""
    x0, x1, y0, y1 = bbox[:, 0], bbox[:, 1], bbox[:, 2], bbox[:, 3]
    widths = x1 - x0 + 1
    heights = y1 - y0 + 1
    counts = np.maximum(widths, 0) * np.maximum(heights, 0)
    total = int(counts.sum())
    zero = (np.zeros((H, W, 3)), np.zeros((H, W)), np.zeros((H, W)), np.ones((H, W)))
    if total == 0:
        return zero
    pg = np.repeat(np.arange(len(op)), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total) - offsets[pg]
    px = x0[pg] + within % widths[pg]
    py = y0[pg] + within // widths[pg]
    dx = px - u[pg, 0]
    dy = py - u[pg, 1]
    maha = cinv[pg, 0] * dx * dx + 2.0 * cinv[pg, 1] * dx * dy + cinv[pg, 2] * dy * dy
    alpha = np.minimum(ALPHA_MAX, op[pg] * np.exp(-0.5 * maha))
    keep = alpha >= ALPHA_MIN
    pg, px, py, alpha = pg[keep], px[keep], py[keep], alpha[keep]
    if len(pg) == 0:
        return zero
    pix = py * W + px
    by_pix = np.argsort(pix, kind="stable")  # preserves depth order per pixel
    pg, alpha, pix = pg[by_pix], alpha[by_pix], pix[by_pix]
    logs = np.log1p(-alpha)
    excl = np.concatenate([[0.0], np.cumsum(logs)[:-1]])
    new_seg = np.empty(len(pix), dtype=bool)
    new_seg[0] = True
    np.not_equal(pix[1:], pix[:-1], out=new_seg[1:])
    seg_id = np.cumsum(new_seg) - 1
    T = np.exp(excl - excl[new_seg][seg_id])
    w = alpha * T
    npix = H * W
    color_img = np.stack(
        [np.bincount(pix, weights=w * color[pg, ch], minlength=npix) for ch in range(3)], axis=1
    ).reshape(H, W, 3)
    depth_raw = np.bincount(pix, weights=w * z[pg], minlength=npix).reshape(H, W)
    acc = np.bincount(pix, weights=w, minlength=npix).reshape(H, W)
    t_final = np.ones(npix)
    seg_total = np.bincount(seg_id, weights=logs)
    t_final[pix[new_seg]] = np.exp(seg_total)
    return color_img, depth_raw, acc, t_final.reshape(H, W)


def _backward_pairs(bbox, u, cinv, op, color, z, t_final, d_col_img, d_draw_img, d_acc_img):
    """Pure-numpy fallback backward; mirrors _backward_kernel."""
    H, W = t_final.shape
    n = len(op)
    x0, x1, y0, y1 = bbox[:, 0], bbox[:, 1], bbox[:, 2], bbox[:, 3]
    widths = x1 - x0 + 1
    heights = y1 - y0 + 1
    counts = np.maximum(widths, 0) * np.maximum(heights, 0)
    out = (np.zeros(n), np.zeros((n, 3)), np.zeros((n, 2)), np.zeros((n, 3)), np.zeros(n), np.zeros(n, dtype=bool))
    total = int(counts.sum())
    if total == 0:
        return out
    pg = np.repeat(np.arange(n), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total) - offsets[pg]
    px = x0[pg] + within % widths[pg]
    py = y0[pg] + within // widths[pg]
    dx = px - u[pg, 0]
    dy = py - u[pg, 1]
    maha = cinv[pg, 0] * dx * dx + 2.0 * cinv[pg, 1] * dx * dy + cinv[pg, 2] * dy * dy
    gauss = np.exp(-0.5 * maha)
    raw = op[pg] * gauss
    alpha = np.minimum(ALPHA_MAX, raw)
    keep = alpha >= ALPHA_MIN
    pg, px, py, dx, dy, gauss, raw, alpha = (v[keep] for v in (pg, px, py, dx, dy, gauss, raw, alpha))
    if len(pg) == 0:
        return out
    pix = py * W + px
    by_pix = np.argsort(pix, kind="stable")
    pg, px, py, dx, dy, gauss, raw, alpha, pix = (v[by_pix] for v in (pg, px, py, dx, dy, gauss, raw, alpha, pix))
    logs = np.log1p(-alpha)
    excl = np.concatenate([[0.0], np.cumsum(logs)[:-1]])
    new_seg = np.empty(len(pix), dtype=bool)
    new_seg[0] = True
    np.not_equal(pix[1:], pix[:-1], out=new_seg[1:])
    seg_id = np.cumsum(new_seg) - 1
    T = np.exp(excl - excl[new_seg][seg_id])
    w = alpha * T

    dC = d_col_img.reshape(-1, 3)
    q = (
        np.einsum("pc,pc->p", dC[pix], color[pg])
        + d_draw_img.reshape(-1)[pix] * z[pg]
        + d_acc_img.reshape(-1)[pix]
    )
    qw = q * w
    rs = np.cumsum(qw[::-1])[::-1]
    rs_ext = np.append(rs, 0.0)
    seg_last = np.append(np.flatnonzero(new_seg)[1:] - 1, len(pix) - 1)
    suffix = rs - rs_ext[seg_last[seg_id] + 1]
    d_alpha = q * T - (suffix - qw) / (1.0 - alpha)

    live = raw < ALPHA_MAX
    d_og = np.where(live, d_alpha, 0.0)
    dsig = -0.5 * gauss * d_og * op[pg]
    ci = cinv[pg]
    d_op = np.bincount(pg, weights=d_og * gauss, minlength=n)
    d_cinv = np.stack(
        [
            np.bincount(pg, weights=dsig * dx * dx, minlength=n),
            np.bincount(pg, weights=dsig * 2.0 * dx * dy, minlength=n),
            np.bincount(pg, weights=dsig * dy * dy, minlength=n),
        ],
        axis=1,
    )
    d_u = np.stack(
        [
            np.bincount(pg, weights=-2.0 * dsig * (ci[:, 0] * dx + ci[:, 1] * dy), minlength=n),
            np.bincount(pg, weights=-2.0 * dsig * (ci[:, 1] * dx + ci[:, 2] * dy), minlength=n),
        ],
        axis=1,
    )
    d_color = np.stack([np.bincount(pg, weights=w * dC[pix, ch], minlength=n) for ch in range(3)], axis=1)
    d_z = np.bincount(pg, weights=w * d_draw_img.reshape(-1)[pix], minlength=n)
    seen = np.zeros(n, dtype=bool)
    seen[np.unique(pg)] = True
    return d_op, d_cinv, d_u, d_color, d_z, seen


def render(cloud: GaussianCloud, view: CameraView, size=None, sh_degree=None) -> RenderOutput:
    """Render color, expected depth and accumulated alpha.

    size: (H, W); defaults to the view's intrinsics. sh_degree caps the
    SH bands actually evaluated (view-dependence warm-up).
    """
    if len(cloud) == 0:
        raise EmptyCloudError("cannot render an empty cloud")
    intr = view.intrinsics
    H, W = size if size is not None else (intr.height, intr.width)
    degree = cloud.sh_degree if sh_degree is None else min(sh_degree, cloud.sh_degree)

    prep = _prepare(cloud, view, H, W, degree)
    if prep is None:
        return RenderOutput(np.zeros((H, W, 3)), np.zeros((H, W)), np.zeros((H, W)), None)
    order, pc, u, cinv, bbox, color, pre_color, dirs, rho, op = prep
    z = np.ascontiguousarray(pc[:, 2])
    kernel = _forward_kernel if _HAVE_NUMBA else _forward_pairs
    color_img, depth_raw, acc, t_final = kernel(bbox, u, cinv, op, color, z, H, W)
    covered = acc > 0
    depth = np.where(covered, depth_raw / np.where(covered, acc, 1.0), 0.0)
    cache = RenderCache(
        H=H,
        W=W,
        sh_degree=degree,
        order=order,
        pc=pc,
        u=u,
        cinv=cinv,
        bbox=bbox,
        color=color,
        pre_color=pre_color,
        dirs=dirs,
        rho=rho,
        op=op,
        t_final=t_final,
    )
    return RenderOutput(color_img, depth, np.clip(acc, 0.0, 1.0), cache)


def render_backward(
    cloud: GaussianCloud,
    view: CameraView,
    output: RenderOutput,
    d_color: np.ndarray,
    d_depth: np.ndarray,
) -> GradientBuffer:
    """Gradients of a scalar loss with upstream d_color/d_depth.

    output must come from render() on the same cloud and view.
    """
    n = len(cloud)
    k_total = cloud.sh.shape[1]
    d_color = np.ascontiguousarray(d_color, dtype=np.float64)
    d_depth = np.ascontiguousarray(d_depth, dtype=np.float64)
    if output.color.shape != d_color.shape or output.depth.shape != d_depth.shape:
        raise MismatchedForwardError(
            f"upstream shapes {d_color.shape}/{d_depth.shape} do not match render output "
            f"{output.color.shape}/{output.depth.shape}"
        )
    cache = output.cache
    if cache is None:  # empty-frustum render
        return GradientBuffer.zeros(n, k_total)

    H, W = cache.H, cache.W
    intr = view.intrinsics
    nv = len(cache.order)
    z = np.ascontiguousarray(cache.pc[:, 2])

    # depth normalization: D = Draw / A where A > 0
    A = output.alpha
    covered = A > 0
    Asafe = np.where(covered, A, 1.0)
    d_draw_img = np.where(covered, d_depth / Asafe, 0.0)
    d_acc_img = np.where(covered, -d_depth * output.depth / Asafe, 0.0)

    kernel = _backward_kernel if _HAVE_NUMBA else _backward_pairs
    d_op, d_cinv, d_u, d_col, d_z_comp, seen_sorted = kernel(
        cache.bbox, cache.u, cache.cinv, cache.op, cache.color, z, cache.t_final, d_color, d_draw_img, d_acc_img
    )
    seen_sorted = np.asarray(seen_sorted, dtype=bool)

    # ---- per-Gaussian chains back to the parameters ----
    order = cache.order
    sub = GaussianCloud(
        cloud.means[order], cloud.log_scales[order], cloud.rotations[order], cloud.opacity_logits[order], cloud.sh[order]
    )
    pc = cache.pc
    R_wc = view.pose.rotmat().T
    cov2d, M, T2, J, cov3d = _project_covariances(sub, pc, R_wc, intr)

    # inverse of the 2x2 (as 3-vector): rows = outputs, cols = (a, b, c)
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    Jinv = np.empty((nv, 3, 3))
    Jinv[:, 0, 0] = -c * c
    Jinv[:, 0, 1] = 2.0 * b * c
    Jinv[:, 0, 2] = -b * b
    Jinv[:, 1, 0] = b * c
    Jinv[:, 1, 1] = -(det + 2.0 * b * b)
    Jinv[:, 1, 2] = a * b
    Jinv[:, 2, 0] = -b * b
    Jinv[:, 2, 1] = 2.0 * a * b
    Jinv[:, 2, 2] = -a * a
    d_cov2d = np.einsum("nop,no->np", Jinv, d_cinv) / (det * det)[:, None]

    G2 = np.empty((nv, 2, 2))
    G2[:, 0, 0] = d_cov2d[:, 0]
    G2[:, 0, 1] = 0.5 * d_cov2d[:, 1]
    G2[:, 1, 0] = 0.5 * d_cov2d[:, 1]
    G2[:, 1, 1] = d_cov2d[:, 2]

    d_M = 2.0 * np.einsum("nji,njk,nkl,nlm->nim", T2, G2, T2, M)
    d_T2 = 2.0 * np.einsum("nij,njk,nkl->nil", G2, T2, cov3d)
    d_J = np.einsum("nil,jl->nij", d_T2, R_wc)

    x, y, zz = pc[:, 0], pc[:, 1], pc[:, 2]
    fx, fy = intr.fx, intr.fy
    d_pc = np.zeros((nv, 3))
    d_pc[:, 0] = d_J[:, 0, 2] * (-fx / zz**2)
    d_pc[:, 1] = d_J[:, 1, 2] * (-fy / zz**2)
    d_pc[:, 2] = (
        d_J[:, 0, 0] * (-fx / zz**2)
        + d_J[:, 0, 2] * (2.0 * fx * x / zz**3)
        + d_J[:, 1, 1] * (-fy / zz**2)
        + d_J[:, 1, 2] * (2.0 * fy * y / zz**3)
    )
    # projection path: du/dpc is the same affine Jacobian
    d_pc += np.einsum("nji,nj->ni", J, d_u)
    d_pc[:, 2] += d_z_comp
    d_means_sorted = d_pc @ R_wc

    # SH color path; the [0, 1] clamp gates the gradient
    gate = (cache.pre_color > 0.0) & (cache.pre_color < 1.0)
    d_pre = d_col * gate
    degree = cache.sh_degree
    k_active = sh_coeff_count(degree)
    basis = sh_basis(cache.dirs, degree)
    d_sh_sorted = np.zeros((nv, k_total, 3))
    d_sh_sorted[:, :k_active, :] = basis[:, :, None] * d_pre[:, None, :]
    coeffs = sub.sh[:, :k_active, :].astype(np.float64)
    bgrad = sh_basis_grad(cache.dirs, degree)
    d_dir = np.einsum("nkd,nkc,nc->nd", bgrad, coeffs, d_pre)
    rho = np.where(cache.rho > 1e-12, cache.rho, np.inf)
    d_means_sorted += (d_dir - cache.dirs * np.einsum("nd,nd->n", cache.dirs, d_dir)[:, None]) / rho[:, None]

    # covariance factor chains: M = R(q) S
    scales = np.exp(sub.log_scales.astype(np.float64))
    R = quats_to_rotmats(sub.rotations.astype(np.float64))
    d_R = d_M * scales[:, None, :]
    d_scales = np.einsum("nij,nij->nj", R, d_M)
    d_log_scales_sorted = d_scales * scales

    qn = sub.rotations.astype(np.float64)
    qnorm = np.linalg.norm(qn, axis=1, keepdims=True)
    qn_unit = qn / qnorm
    w_, x_, y_, z_ = qn_unit[:, 0], qn_unit[:, 1], qn_unit[:, 2], qn_unit[:, 3]
    zero = np.zeros(nv)
    dR_dq = np.empty((nv, 4, 3, 3))
    dR_dq[:, 0] = 2.0 * np.stack(
        [np.stack([zero, -z_, y_], 1), np.stack([z_, zero, -x_], 1), np.stack([-y_, x_, zero], 1)], axis=1
    )
    dR_dq[:, 1] = 2.0 * np.stack(
        [np.stack([zero, y_, z_], 1), np.stack([y_, -2 * x_, -w_], 1), np.stack([z_, w_, -2 * x_], 1)], axis=1
    )
    dR_dq[:, 2] = 2.0 * np.stack(
        [np.stack([-2 * y_, x_, w_], 1), np.stack([x_, zero, z_], 1), np.stack([-w_, z_, -2 * y_], 1)], axis=1
    )
    dR_dq[:, 3] = 2.0 * np.stack(
        [np.stack([-2 * z_, -w_, x_], 1), np.stack([w_, -2 * z_, y_], 1), np.stack([x_, y_, zero], 1)], axis=1
    )
    d_qunit = np.einsum("nqij,nij->nq", dR_dq, d_R)
    # through the normalization q / |q|
    d_rot_sorted = (d_qunit - qn_unit * np.einsum("nq,nq->n", qn_unit, d_qunit)[:, None]) / qnorm

    op = cache.op
    d_logit_sorted = d_op * op * (1.0 - op)

    ndc_sorted = np.hypot(d_u[:, 0] * W / 2.0, d_u[:, 1] * H / 2.0)

    buf = GradientBuffer.zeros(n, k_total)
    buf.d_means[order] = d_means_sorted
    buf.d_log_scales[order] = d_log_scales_sorted
    buf.d_rotations[order] = d_rot_sorted
    buf.d_opacity_logits[order] = d_logit_sorted
    buf.d_sh[order] = d_sh_sorted
    buf.ndc_grad_norm[order] = ndc_sorted
    buf.seen[order] = seen_sorted
    return buf
