"""Point-cloud initialization pipeline and depth-map utilities.

Covers colorizing sweeps by image projection, accumulating and
voxel-downsampling them into one cloud, z-buffer depth rendering, a
deterministic depth-completion fallback, and the top-row mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyResultError, NoValidPixelsError, ShapeMismatchError
from .geometry import CameraView, project_points

# Neighbors used by the inverse-distance completion fallback.
_COMPLETION_NEIGHBORS = 8


@dataclass(frozen=True)
class PointSweep:
    """One LiDAR sweep, already transformed into the world frame."""

    points: np.ndarray  # (N, 3) meters
    source_frame: int = -1

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("sweep contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class ColoredPointCloud:
    positions: np.ndarray  # (N, 3) meters
    colors: np.ndarray  # (N, 3) in [0, 1]

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        col = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(pos) != len(col):
            raise ShapeMismatchError(f"{len(pos)} positions vs {len(col)} colors")
        if not np.all(np.isfinite(pos)):
            raise ValueError("cloud contains non-finite positions")
        if len(col) and (col.min() < 0.0 or col.max() > 1.0):
            raise ValueError("colors must lie in [0, 1]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth in meters with a validity mask.

    Invalid entries carry no value (stored as 0); the top `top_mask_rows`
    rows are always invalid.
    """

    values: np.ndarray  # (H, W) meters
    valid: np.ndarray  # (H, W) bool
    top_mask_rows: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if vals.shape != valid.shape or vals.ndim != 2:
            raise ShapeMismatchError(f"values {vals.shape} vs mask {valid.shape}")
        valid = valid.copy()
        valid[: self.top_mask_rows] = False
        vals = np.where(valid, vals, 0.0)
        if np.any(vals[valid] <= 0.0):
            raise ValueError("valid depth entries must be positive")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self):
        return self.values.shape


def _nearest_pixels(view: CameraView, points):
    """Project points and round to the nearest pixel center.

    Returns (col, row, depth, keep) where keep marks points in front of
    the camera whose nearest pixel lies inside the image.
    """
    uv, z, in_front = project_points(view, points)
    col = np.round(uv[:, 0]).astype(np.int64)
    row = np.round(uv[:, 1]).astype(np.int64)
    K = view.intrinsics
    keep = in_front & (col >= 0) & (col < K.width) & (row >= 0) & (row < K.height)
    return col, row, z, keep


def colorize_sweep(sweep: PointSweep, frame) -> ColoredPointCloud:
    """Assign each sweep point the nearest-pixel color of `frame`'s image.

    `frame` must expose .image (H, W, 3 in [0, 1]) and .view (CameraView).
    Points behind the camera or projecting outside the image are dropped.
    """
    if len(sweep) == 0:
        raise EmptyResultError("cannot colorize an empty sweep")
    col, row, _, keep = _nearest_pixels(frame.view, sweep.points)
    if not np.any(keep):
        raise EmptyResultError("no sweep point projects into the frame")
    return ColoredPointCloud(sweep.points[keep], frame.image[row[keep], col[keep]])


def accumulate_and_downsample(clouds, voxel_size: float) -> ColoredPointCloud:
    """Merge clouds and collapse each occupied voxel to its centroid.

    The voxel grid is floor(p / voxel_size); positions and colors are
    averaged per voxel. Output order is the lexicographic voxel-key order,
    so the result is independent of input ordering.
    """
    if voxel_size <= 0.0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    clouds = [c for c in clouds if len(c)]
    if not clouds:
        return ColoredPointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    pos = np.concatenate([c.positions for c in clouds])
    col = np.concatenate([c.colors for c in clouds])
    keys = np.floor(pos / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    n_voxels = len(counts)
    mean_pos = np.zeros((n_voxels, 3))
    mean_col = np.zeros((n_voxels, 3))
    for k in range(3):
        mean_pos[:, k] = np.bincount(inverse, weights=pos[:, k], minlength=n_voxels)
        mean_col[:, k] = np.bincount(inverse, weights=col[:, k], minlength=n_voxels)
    mean_pos /= counts[:, None]
    mean_col /= counts[:, None]
    # averaging can nudge colors a hair past the boundary
    return ColoredPointCloud(mean_pos, np.clip(mean_col, 0.0, 1.0))


def render_depth(cloud, view: CameraView, top_mask_rows: int = 0) -> DepthMap:
    """Z-buffer the cloud's points into a sparse depth map.

    Each pixel keeps the minimum camera depth among points landing on it;
    pixels with no point, and the top `top_mask_rows` rows, are invalid.
    Accepts a ColoredPointCloud or a PointSweep.
    """
    points = cloud.positions if isinstance(cloud, ColoredPointCloud) else cloud.points
    K = view.intrinsics
    H, W = K.height, K.width
    depth = np.full((H, W), np.inf)
    if len(points):
        col, row, z, keep = _nearest_pixels(view, points)
        np.minimum.at(depth, (row[keep], col[keep]), z[keep])
    valid = np.isfinite(depth)
    return DepthMap(np.where(valid, depth, 0.0), valid, top_mask_rows)


def complete_depth(sparse: DepthMap) -> DepthMap:
    """Fill every unmasked pixel by inverse-distance weighting of the 8
    nearest valid pixels; valid inputs pass through untouched.

    Deterministic for a fixed input (valid pixels enumerated row-major).
    Raises NoValidPixelsError when nothing below the mask is valid.
    """
    H, W = sparse.shape
    mask_rows = sparse.top_mask_rows
    if not np.any(sparse.valid):
        raise NoValidPixelsError("no valid depth below the masked rows")
    fill_rows, fill_cols = np.nonzero(~sparse.valid)
    below = fill_rows >= mask_rows
    fill_rows, fill_cols = fill_rows[below], fill_cols[below]
    values = sparse.values.copy()
    if len(fill_rows):
        # row-major enumeration fixes the tie-break order inside the tree
        src_rows, src_cols = np.nonzero(sparse.valid)
        src = np.column_stack([src_rows, src_cols]).astype(np.float64)
        tree = cKDTree(src)
        k = min(_COMPLETION_NEIGHBORS, len(src))
        dist, idx = tree.query(np.column_stack([fill_rows, fill_cols]).astype(np.float64), k=k)
        dist = dist.reshape(len(fill_rows), k)
        idx = idx.reshape(len(fill_rows), k)
        w = 1.0 / dist  # query pixels are never valid, so dist > 0
        z = sparse.values[src_rows[idx], src_cols[idx]]
        values[fill_rows, fill_cols] = (w * z).sum(axis=1) / w.sum(axis=1)
    valid = np.ones((H, W), dtype=bool)
    valid[:mask_rows] = False
    return DepthMap(np.where(valid, values, 0.0), valid, mask_rows)
