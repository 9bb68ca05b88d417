"""Procedural street scene generation for tests and ablations.

Builds a ground-truth Gaussian cloud shaped like a short road corridor
(asphalt with dashed lane markings, building facades on both sides, a few
poles), renders photographs of it along a straight camera path, simulates
LiDAR sweeps from the same geometry, and writes everything out in the
dataset directory layout. Held-out test views get a yaw offset so novel
view quality is probed away from the straight-ahead training direction.

World frame: z up, the road runs along +x, y spans the road width.
Cameras look down +x (camera z forward, y down).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .gaussians import SH_C0, GaussianCloud, inverse_sigmoid
from .geometry import CameraView, Intrinsics, Pose, perturb_yaw, rotmat_to_quat
from .rasterizer import render
from .scene_io import Split, save_checkpoint

GT_CLOUD_FILENAME = "gt_cloud.sgdc"
CAMERA_HEIGHT = 1.5
ROAD_HALF_WIDTH = 4.0
BUILDING_OFFSET = 6.0


def _colors_to_dc(colors):
    return ((colors - 0.5) / SH_C0)[:, None, :]


def _facing_along_x() -> np.ndarray:
    # camera x = world -y, camera y = world -z, camera z = world +x
    return np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def build_street_cloud(seed: int = 0, length: float = 36.0) -> GaussianCloud:
    """Ground-truth scene of a few thousand opaque Gaussians."""
    rng = np.random.default_rng([seed, 2024])
    positions = []
    colors = []
    scales = []

    # asphalt carpet with mild albedo speckle
    xs = np.arange(0.0, length, 0.6)
    ys = np.arange(-ROAD_HALF_WIDTH, ROAD_HALF_WIDTH + 1e-9, 0.5)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    road = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    road[:, :2] += rng.uniform(-0.05, 0.05, (len(road), 2))
    positions.append(road)
    gray = 0.25 + rng.uniform(-0.04, 0.04, len(road))
    colors.append(np.stack([gray, gray, gray], axis=1))
    scales.append(np.full((len(road), 3), 0.35))

    # dashed center line: 2 m dashes with 2 m gaps
    dash_x = []
    x = 1.0
    while x < length - 1.0:
        dash_x.extend(np.arange(x, min(x + 2.0, length - 1.0), 0.4))
        x += 4.0
    dashes = np.stack([np.array(dash_x), np.zeros(len(dash_x)), np.full(len(dash_x), 0.02)], axis=1)
    positions.append(dashes)
    colors.append(np.full((len(dashes), 3), 0.92))
    scales.append(np.full((len(dashes), 3), 0.22))

    # building facades: vertical planes of Gaussians, one base color per block
    for side in (-1.0, 1.0):
        x = 0.0
        while x < length:
            block_len = rng.uniform(4.0, 8.0)
            height = rng.uniform(3.0, 6.0)
            base = rng.uniform(0.25, 0.75, 3)
            bx = np.arange(x, min(x + block_len, length), 0.55)
            bz = np.arange(0.3, height, 0.55)
            fx, fz = np.meshgrid(bx, bz, indexing="ij")
            wall = np.stack([fx.ravel(), np.full(fx.size, side * BUILDING_OFFSET), fz.ravel()], axis=1)
            if len(wall):
                positions.append(wall)
                # window-ish darker grid every other row
                shade = np.where((np.round(fz.ravel() / 0.55) % 2) == 0, 1.0, 0.72)
                colors.append(np.clip(base[None, :] * shade[:, None] + rng.uniform(-0.02, 0.02, (len(wall), 3)), 0.0, 1.0))
                scales.append(np.full((len(wall), 3), 0.4))
            x += block_len + rng.uniform(1.0, 2.5)

    # sidewalk strips between road and buildings
    for side in (-1.0, 1.0):
        sx = np.arange(0.0, length, 0.7)
        sy = np.full(len(sx), side * (ROAD_HALF_WIDTH + 0.8))
        walk = np.stack([sx, sy, np.full(len(sx), 0.05)], axis=1)
        positions.append(walk)
        tone = 0.55 + rng.uniform(-0.03, 0.03, len(walk))
        colors.append(np.stack([tone, tone, tone * 0.95], axis=1))
        scales.append(np.full((len(walk), 3), 0.45))

    # a few poles
    for _ in range(6):
        px = rng.uniform(2.0, length - 2.0)
        side = rng.choice([-1.0, 1.0])
        pz = np.arange(0.2, 3.2, 0.3)
        pole = np.stack([np.full(len(pz), px), np.full(len(pz), side * (ROAD_HALF_WIDTH + 1.3)), pz], axis=1)
        positions.append(pole)
        colors.append(np.full((len(pole), 3), 0.18))
        scales.append(np.full((len(pole), 3), 0.12))

    pos = np.concatenate(positions).astype(np.float32)
    col = np.clip(np.concatenate(colors), 0.0, 1.0)
    scl = np.concatenate(scales).astype(np.float32)
    n = len(pos)
    quats = np.zeros((n, 4), dtype=np.float32)
    quats[:, 0] = 1.0
    return GaussianCloud(
        means=pos,
        log_scales=np.log(scl).astype(np.float32),
        rotations=quats,
        opacity_logits=np.full(n, inverse_sigmoid(0.95), dtype=np.float32),
        sh=_colors_to_dc(col).astype(np.float32),
    )


def straight_path_pose(x: float, y: float = 0.0) -> Pose:
    R = _facing_along_x()
    return Pose(rotmat_to_quat(R), np.array([x, y, CAMERA_HEIGHT]))


def make_camera_track(n_train: int, n_test: int, length: float, yaw_bounds_deg, seed: int):
    """Poses along the road; test poses interleave and carry a yaw offset."""
    rng = np.random.default_rng([seed, 7])
    n_total = n_train + n_test
    xs = np.linspace(1.0, length * 0.75, n_total)
    test_ids = set(np.round(np.linspace(1, n_total - 2, n_test)).astype(int).tolist())
    lo, hi = np.deg2rad(yaw_bounds_deg[0]), np.deg2rad(yaw_bounds_deg[1])
    poses, split_train, split_test = [], [], []
    for i, x in enumerate(xs):
        pose = straight_path_pose(float(x))
        if i in test_ids:
            theta = rng.uniform(lo, hi) * (1.0 if i % 2 == 0 else -1.0)
            pose = perturb_yaw(pose, theta)
            split_test.append(i)
        else:
            split_train.append(i)
        poses.append(pose)
    return poses, Split(tuple(split_train), tuple(split_test))


def _simulate_sweep(cloud: GaussianCloud, view: CameraView, rng) -> np.ndarray:
    """Ego-frame (x, y, z, intensity) points visible from the view."""
    pc = view.pose.apply_inverse(cloud.means)
    z = pc[:, 2]
    intr = view.intrinsics
    u = intr.fx * pc[:, 0] / np.where(z > 0, z, 1.0) + intr.cx
    v = intr.fy * pc[:, 1] / np.where(z > 0, z, 1.0) + intr.cy
    keep = (z > 0.5) & (u >= -2) & (u < intr.width + 2) & (v >= -2) & (v < intr.height + 2)
    pts = pc[keep]
    intensity = rng.uniform(0.1, 0.9, (len(pts), 1))
    return np.concatenate([pts, intensity], axis=1).astype("<f4")


def synthesize_scene(
    out_dir,
    width: int = 64,
    height: int = 48,
    n_train: int = 20,
    n_test: int = 8,
    seed: int = 0,
    yaw_bounds_deg=(15.0, 30.0),
    length: float = 36.0,
    focal: float | None = None,
):
    """Write a full synthetic dataset plus the ground-truth cloud.

    Returns (dataset root, ground-truth GaussianCloud).
    """
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "lidar").mkdir(parents=True, exist_ok=True)
    cloud = build_street_cloud(seed=seed, length=length)
    focal = focal if focal is not None else 0.9 * width
    intr = Intrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    poses, split = make_camera_track(n_train, n_test, length, yaw_bounds_deg, seed)

    rng = np.random.default_rng([seed, 13])
    pose_lines = []
    split_lines = []
    for i, pose in enumerate(poses):
        view = CameraView(intr, pose)
        img = render(cloud, view).color
        Image.fromarray((np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)).save(
            root / "images" / f"{i:06d}.png"
        )
        R = pose.rotmat()
        row = np.concatenate([R, pose.t[:, None]], axis=1).ravel()
        pose_lines.append(f"{i} " + " ".join(repr(float(v)) for v in row))
        kind = "train" if i in set(split.train) else "test"
        split_lines.append(f"{i} {kind}")
        if kind == "train":
            sweep = _simulate_sweep(cloud, view, rng)
            (root / "lidar" / f"{i:06d}.bin").write_bytes(sweep.tobytes())
    (root / "poses.txt").write_text("\n".join(pose_lines) + "\n")
    (root / "split.txt").write_text("\n".join(split_lines) + "\n")
    (root / "intrinsics.txt").write_text(
        f"{intr.fx} {intr.fy} {intr.cx} {intr.cy} {intr.width} {intr.height}\n"
    )
    save_checkpoint(cloud, 0, root / GT_CLOUD_FILENAME)
    return root, cloud
