"""Smoke-scale two-stage training on a street dataset directory.

Reads the splat trainer's on-disk layout directly: images/%06d.png,
poses.txt (frame id + row-major 3x4 camera-to-world), intrinsics.txt
(fx fy cx cy width height), lidar/%06d.bin (packed little-endian float32
x, y, z, intensity in the camera frame). Depth maps come from projecting
each frame's own sweep through the pinhole model with a nearest-depth
z-buffer. Training is plain SGD on the hand-derived gradients; the point
is exercising the two-stage contract end to end, not image quality.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .denoiser import DenoiserState, stage1_grads, stage2_grads, T_MAX
from .embedding import embed_conditions


def _read_intrinsics(root: Path) -> tuple[float, float, float, float, int, int]:
    tokens = (root / "intrinsics.txt").read_text().split()
    if len(tokens) != 6:
        raise ValueError(f"intrinsics.txt must hold 6 values, found {len(tokens)}")
    fx, fy, cx, cy = map(float, tokens[:4])
    width, height = int(tokens[4]), int(tokens[5])
    return fx, fy, cx, cy, width, height


def _read_frame_ids(root: Path) -> list[int]:
    ids = []
    for line in (root / "poses.txt").read_text().splitlines():
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 13:
            raise ValueError(f"poses.txt line needs 13 tokens, found {len(tokens)}")
        ids.append(int(tokens[0]))
    return sorted(ids)


def _load_image(root: Path, frame_id: int) -> np.ndarray:
    with Image.open(root / "images" / f"{frame_id:06d}.png") as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def _sweep_depth(root: Path, frame_id: int, intr) -> np.ndarray:
    """Project the frame's LiDAR sweep to a sparse depth map; 0 = no return."""
    fx, fy, cx, cy, width, height = intr
    depth = np.zeros((height, width))
    path = root / "lidar" / f"{frame_id:06d}.bin"
    if not path.exists():
        return depth
    pts = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(-1, 4)[:, :3].astype(np.float64)
    ahead = pts[:, 2] > 1e-6
    pts = pts[ahead]
    if not len(pts):
        return depth
    u = np.rint(fx * pts[:, 0] / pts[:, 2] + cx).astype(int)
    v = np.rint(fy * pts[:, 1] / pts[:, 2] + cy).astype(int)
    keep = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    u, v, z = u[keep], v[keep], pts[keep, 2]
    # nearest return wins per pixel
    for ui, vi, zi in sorted(zip(u, v, z), key=lambda r: -r[2]):
        depth[vi, ui] = zi
    return depth


def build_batch(
    root: Path,
    frame_ids: list[int],
    state: DenoiserState,
    rng: np.random.Generator,
    batch_size: int,
    with_depth: bool,
    dropout_p: float = 0.1,
) -> list[dict]:
    """Sample training tuples: each anchor conditions on its two neighbors."""
    root = Path(root)
    intr = _read_intrinsics(root) if with_depth else None
    batch = []
    for _ in range(batch_size):
        idx = int(rng.integers(0, len(frame_ids)))
        prev_id = frame_ids[max(idx - 1, 0)]
        next_id = frame_ids[min(idx + 1, len(frame_ids) - 1)]
        ref_prev = _load_image(root, prev_id)
        ref_next = _load_image(root, next_id)
        depth_prev = depth_next = depth_target = None
        if with_depth:
            depth_prev = _sweep_depth(root, prev_id, intr)
            depth_next = _sweep_depth(root, next_id, intr)
            depth_target = _sweep_depth(root, frame_ids[idx], intr)
        cond = embed_conditions(
            state.encoders,
            text="street scene",
            ref_prev=ref_prev,
            ref_next=ref_next,
            depth_prev=depth_prev,
            depth_next=depth_next,
            dropout_p=dropout_p,
            rng=rng,
        )
        sample = {
            "image": _load_image(root, frame_ids[idx]),
            "cond": cond,
            "t": int(rng.integers(1, T_MAX + 1)),
            "noise_seed": int(rng.integers(0, 2**31 - 1)),
        }
        if with_depth:
            sample["depth_target"] = depth_target
        batch.append(sample)
    return batch


def _apply(arr: np.ndarray, grad: np.ndarray, lr: float) -> None:
    arr -= lr * grad


def train_stage1(
    state: DenoiserState, root, steps: int, batch_size: int, lr: float, seed: int
) -> list[float]:
    root = Path(root)
    frame_ids = _read_frame_ids(root)
    rng = np.random.default_rng(seed)
    from .denoiser import stage1_loss

    losses = []
    for _ in range(steps):
        batch = build_batch(root, frame_ids, state, rng, batch_size, with_depth=False)
        losses.append(stage1_loss(state, batch))
        grads = stage1_grads(state, batch)
        for key, g in grads["enc"].items():
            _apply(getattr(state.enc, key), g, lr)
        _apply(state.dec_w, grads["dec_w"], lr)
        _apply(state.dec_b, grads["dec_b"], lr)
    return losses


def train_stage2(
    state: DenoiserState, root, steps: int, batch_size: int, lr: float, seed: int
) -> list[float]:
    if state.control is None:
        state.start_stage2()
    root = Path(root)
    frame_ids = _read_frame_ids(root)
    rng = np.random.default_rng(seed)
    from .denoiser import stage2_loss

    losses = []
    for _ in range(steps):
        batch = build_batch(root, frame_ids, state, rng, batch_size, with_depth=True)
        losses.append(stage2_loss(state, batch))
        grads = stage2_grads(state, batch)
        for key, g in grads["control"].items():
            _apply(getattr(state.control, key), g, lr)
        _apply(state.hint_w, grads["hint_w"], lr)
        _apply(state.gate_w, grads["gate_w"], lr)
    return losses
