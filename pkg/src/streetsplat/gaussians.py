"""The Gaussian scene representation: columnar storage, initialization from
a colored point cloud, spherical-harmonic color, and adaptive density control.

Parameterization: covariance is kept factored as exp(log_scale) and a unit
quaternion (R S S^T R^T is SPD by construction); opacity is a logit mapped
through sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloudError, ShapeMismatchError

# Real SH basis constants, bands 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

# Fallback scale (meters) for a cloud too small to have neighbors.
_LONE_POINT_SCALE = 0.1


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_count(k: int) -> int:
    degree = int(round(np.sqrt(k))) - 1
    if sh_coeff_count(degree) != k:
        raise ValueError(f"{k} is not a valid SH coefficient count")
    return degree


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(p):
    return np.log(p / (1.0 - p))


@dataclass(frozen=True)
class GaussianCloud:
    """Columnar per-Gaussian parameters; float32 storage throughout."""

    means: np.ndarray  # (N, 3)
    log_scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) quaternion wxyz, not necessarily unit
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray  # (N, K, 3)

    def __post_init__(self):
        arrays = {
            "means": np.asarray(self.means, dtype=np.float32).reshape(-1, 3),
            "log_scales": np.asarray(self.log_scales, dtype=np.float32).reshape(-1, 3),
            "rotations": np.asarray(self.rotations, dtype=np.float32).reshape(-1, 4),
            "opacity_logits": np.asarray(self.opacity_logits, dtype=np.float32).reshape(-1),
            "sh": np.asarray(self.sh, dtype=np.float32),
        }
        n = len(arrays["means"])
        if arrays["sh"].ndim != 3 or arrays["sh"].shape[2] != 3:
            raise ShapeMismatchError(f"sh must be (N, K, 3), got {arrays['sh'].shape}")
        for name, arr in arrays.items():
            if len(arr) != n:
                raise ShapeMismatchError(f"{name} has length {len(arr)}, expected {n}")
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.means)

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh.shape[1])

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.means.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.opacity_logits.copy(),
            self.sh.copy(),
        )

    def opacities(self):
        return sigmoid(self.opacity_logits.astype(np.float64))

    def scales(self):
        return np.exp(self.log_scales.astype(np.float64))

    def covariances(self):
        """Reconstructed (N, 3, 3) covariances R S S^T R^T."""
        R = quats_to_rotmats(self.rotations.astype(np.float64))
        M = R * self.scales()[:, None, :]
        return M @ M.transpose(0, 2, 1)


def quats_to_rotmats(q):
    """Vectorized (N, 4) wxyz -> (N, 3, 3); normalizes first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def sh_basis(dirs, degree: int):
    """Real SH basis values for unit directions. dirs: (N, 3) -> (N, K)."""
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((len(dirs), sh_coeff_count(degree)))
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2 * z * z - x * x - y * y)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (x * x - y * y)
    if degree >= 3:
        out[:, 9] = SH_C3[0] * y * (3 * x * x - y * y)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4 * z * z - x * x - y * y)
        out[:, 12] = SH_C3[3] * z * (2 * z * z - 3 * x * x - 3 * y * y)
        out[:, 13] = SH_C3[4] * x * (4 * z * z - x * x - y * y)
        out[:, 14] = SH_C3[5] * z * (x * x - y * y)
        out[:, 15] = SH_C3[6] * x * (x * x - 3 * y * y)
    return out


def sh_basis_grad(dirs, degree: int):
    """d basis / d direction, shape (N, K, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    g = np.zeros((len(dirs), sh_coeff_count(degree), 3))
    if degree >= 1:
        g[:, 1] = np.stack([zero, np.full_like(x, -SH_C1), zero], axis=1)
        g[:, 2] = np.stack([zero, zero, np.full_like(x, SH_C1)], axis=1)
        g[:, 3] = np.stack([np.full_like(x, -SH_C1), zero, zero], axis=1)
    if degree >= 2:
        g[:, 4] = SH_C2[0] * np.stack([y, x, zero], axis=1)
        g[:, 5] = SH_C2[1] * np.stack([zero, z, y], axis=1)
        g[:, 6] = SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=1)
        g[:, 7] = SH_C2[3] * np.stack([z, zero, x], axis=1)
        g[:, 8] = SH_C2[4] * np.stack([2 * x, -2 * y, zero], axis=1)
    if degree >= 3:
        g[:, 9] = SH_C3[0] * np.stack([6 * x * y, 3 * x * x - 3 * y * y, zero], axis=1)
        g[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], axis=1)
        g[:, 11] = SH_C3[2] * np.stack([-2 * x * y, 4 * z * z - x * x - 3 * y * y, 8 * y * z], axis=1)
        g[:, 12] = SH_C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * z * z - 3 * x * x - 3 * y * y], axis=1)
        g[:, 13] = SH_C3[4] * np.stack([4 * z * z - 3 * x * x - y * y, -2 * x * y, 8 * x * z], axis=1)
        g[:, 14] = SH_C3[5] * np.stack([2 * x * z, -2 * y * z, x * x - y * y], axis=1)
        g[:, 15] = SH_C3[6] * np.stack([3 * x * x - 3 * y * y, -6 * x * y, zero], axis=1)
    return g


def eval_sh(coeffs, view_dir):
    """Evaluate SH color for one direction: 0.5 offset, clamped to [0, 1].

    coeffs: (K, 3) for one Gaussian or (N, K, 3) for many.
    """
    d = np.asarray(view_dir, dtype=np.float64)
    if not np.isclose(np.linalg.norm(d), 1.0, atol=1e-6):
        raise ValueError("view_dir must be unit length")
    coeffs = np.asarray(coeffs, dtype=np.float64)
    single = coeffs.ndim == 2
    if single:
        coeffs = coeffs[None]
    degree = sh_degree_from_count(coeffs.shape[1])
    basis = sh_basis(d[None], degree)[0]
    color = 0.5 + np.einsum("k,nkc->nc", basis, coeffs)
    color = np.clip(color, 0.0, 1.0)
    return color[0] if single else color


def init_from_points(cloud, opacity0: float = 0.1, sh_degree: int = 3) -> GaussianCloud:
    """One Gaussian per point: position, DC color, isotropic scale from the
    mean distance to the (up to) 3 nearest neighbors, identity rotation.
    """
    n = len(cloud)
    if n == 0:
        raise EmptyCloudError("cannot initialize from an empty point cloud")
    pos = cloud.positions
    if n == 1:
        scales = np.full(1, _LONE_POINT_SCALE)
    else:
        k = min(3, n - 1)
        dist, _ = cKDTree(pos).query(pos, k=k + 1)  # first neighbor is the point itself
        scales = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    sh = np.zeros((n, sh_coeff_count(sh_degree), 3), dtype=np.float32)
    sh[:, 0, :] = (cloud.colors - 0.5) / SH_C0
    quats = np.zeros((n, 4), dtype=np.float32)
    quats[:, 0] = 1.0
    return GaussianCloud(
        means=pos,
        log_scales=np.repeat(np.log(scales)[:, None], 3, axis=1),
        rotations=quats,
        opacity_logits=np.full(n, inverse_sigmoid(opacity0)),
        sh=sh,
    )


@dataclass(frozen=True)
class DensifyConfig:
    grad_threshold: float = 2e-4  # on NDC positional gradients
    opacity_threshold: float = 0.005
    split_scale_divisor: float = 1.6
    percent_dense: float = 0.01  # of scene extent; splits above, clones below
    interval: int = 100
    start_iter: int = 500
    end_iter: int = 15000
    opacity_reset_interval: int = 3000
    max_count: int = 0  # 0 = unlimited


@dataclass(frozen=True)
class DensifyOutcome:
    """Index bookkeeping for optimizer-state surgery after densification.

    carry_src[i] is the old index whose optimizer moments Gaussian i keeps,
    or -1 for freshly created Gaussians (clone copies and split children).
    """

    cloud: GaussianCloud
    carry_src: np.ndarray
    n_cloned: int
    n_split: int
    n_pruned: int


def densify_and_prune(
    cloud: GaussianCloud,
    avg_grad_norm,
    cfg: DensifyConfig,
    scene_extent: float,
    rng: np.random.Generator,
) -> DensifyOutcome:
    """Clone small / split large high-gradient Gaussians, prune transparent ones.

    avg_grad_norm: per-Gaussian mean NDC positional-gradient norm. Split
    children sample their means from the parent's own distribution and take
    scales divided by cfg.split_scale_divisor; the parent is removed.
    """
    n = len(cloud)
    avg_grad_norm = np.asarray(avg_grad_norm, dtype=np.float64).reshape(n)
    max_scale = np.exp(cloud.log_scales.astype(np.float64)).max(axis=1)
    hot = avg_grad_norm >= cfg.grad_threshold
    big = max_scale > cfg.percent_dense * scene_extent
    clone = hot & ~big
    split = hot & big
    if cfg.max_count and n + clone.sum() + 2 * split.sum() - split.sum() > cfg.max_count:
        clone = np.zeros(n, dtype=bool)
        split = np.zeros(n, dtype=bool)

    keep = ~split  # split parents are replaced by their children
    pieces = {
        "means": [cloud.means[keep]],
        "log_scales": [cloud.log_scales[keep]],
        "rotations": [cloud.rotations[keep]],
        "opacity_logits": [cloud.opacity_logits[keep]],
        "sh": [cloud.sh[keep]],
    }
    carry = [np.flatnonzero(keep)]

    clone_idx = np.flatnonzero(clone & keep)
    if len(clone_idx):
        pieces["means"].append(cloud.means[clone_idx])
        pieces["log_scales"].append(cloud.log_scales[clone_idx])
        pieces["rotations"].append(cloud.rotations[clone_idx])
        pieces["opacity_logits"].append(cloud.opacity_logits[clone_idx])
        pieces["sh"].append(cloud.sh[clone_idx])
        carry.append(np.full(len(clone_idx), -1, dtype=np.int64))

    split_idx = np.flatnonzero(split)
    if len(split_idx):
        parent_R = quats_to_rotmats(cloud.rotations[split_idx].astype(np.float64))
        parent_scales = np.exp(cloud.log_scales[split_idx].astype(np.float64))
        for _ in range(2):
            local = rng.standard_normal((len(split_idx), 3)) * parent_scales
            child_means = cloud.means[split_idx].astype(np.float64) + np.einsum("nij,nj->ni", parent_R, local)
            pieces["means"].append(child_means.astype(np.float32))
            pieces["log_scales"].append(
                (cloud.log_scales[split_idx].astype(np.float64) - np.log(cfg.split_scale_divisor)).astype(np.float32)
            )
            pieces["rotations"].append(cloud.rotations[split_idx])
            pieces["opacity_logits"].append(cloud.opacity_logits[split_idx])
            pieces["sh"].append(cloud.sh[split_idx])
            carry.append(np.full(len(split_idx), -1, dtype=np.int64))

    merged = GaussianCloud(**{k: np.concatenate(v) for k, v in pieces.items()})
    carry_src = np.concatenate(carry)

    alive = sigmoid(merged.opacity_logits.astype(np.float64)) >= cfg.opacity_threshold
    pruned = int((~alive).sum())
    merged = GaussianCloud(
        merged.means[alive],
        merged.log_scales[alive],
        merged.rotations[alive],
        merged.opacity_logits[alive],
        merged.sh[alive],
    )
    return DensifyOutcome(merged, carry_src[alive], int(len(clone_idx)), int(len(split_idx)), pruned)


def reset_opacities(cloud: GaussianCloud, ceiling: float = 0.01) -> GaussianCloud:
    """Clamp all opacities down to `ceiling`; periodic escape from local optima."""
    cap = float(inverse_sigmoid(ceiling))
    return replace(cloud, opacity_logits=np.minimum(cloud.opacity_logits, np.float32(cap)))


def write_ply(cloud: GaussianCloud, path):
    """ASCII PLY dump of means and DC colors for external inspection."""
    color = np.clip(0.5 + SH_C0 * cloud.sh[:, 0, :].astype(np.float64), 0.0, 1.0)
    rgb = (color * 255).astype(np.uint8)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for p, c in zip(cloud.means, rgb):
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")
