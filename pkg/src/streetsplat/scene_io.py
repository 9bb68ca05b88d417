"""Dataset directory loading, train/test splits, and binary persistence
for Gaussian clouds and colored point clouds.

Layout on disk mirrors how driving datasets ship: images/%06d.png,
poses.txt holding one camera-to-world 3x4 per line, intrinsics.txt with a
single pinhole record, and optional lidar/%06d.bin sweeps of packed
little-endian float32 (x, y, z, intensity) in the frame's camera frame.
A split.txt assigns every frame to train or test; splits can also be
generated programmatically.

Checkpoints ("SGDC") and colored point clouds ("SGPC") are flat binary:
magic, u32 version, counts, then contiguous little-endian float32 arrays
per field. Round trips are bit-exact on every stored value.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    CheckpointError,
    ConfigError,
    DimensionMismatchError,
    InvalidRateError,
    MalformedPoseError,
    MissingFileError,
    VersionMismatchError,
)
from .gaussians import GaussianCloud
from .geometry import CameraView, Intrinsics, Pose
from .lidar import ColoredPointCloud, PointSweep

CHECKPOINT_MAGIC = b"SGDC"
POINTCLOUD_MAGIC = b"SGPC"
FORMAT_VERSION = 1

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class TrainingFrame:
    frame_id: int
    image: np.ndarray  # (H, W, 3) in [0, 1]
    pose: Pose  # camera-to-world
    lidar: PointSweep | None
    view: CameraView  # pose + dataset intrinsics

    def __repr__(self):
        n = 0 if self.lidar is None else len(self.lidar)
        return f"TrainingFrame(id={self.frame_id}, image={self.image.shape}, lidar={n} pts)"


@dataclass(frozen=True)
class Split:
    train: tuple
    test: tuple

    @property
    def drop_rate(self) -> float:
        total = len(self.train) + len(self.test)
        return len(self.test) / total if total else 0.0


@dataclass(frozen=True)
class DatasetManifest:
    intrinsics: Intrinsics
    frames: tuple
    split: Split

    @property
    def drop_rate(self) -> float:
        return self.split.drop_rate

    def frame_by_id(self, frame_id: int) -> TrainingFrame:
        for frame in self.frames:
            if frame.frame_id == frame_id:
                return frame
        raise KeyError(f"no frame with id {frame_id}")

    def train_frames(self):
        return [f for f in self.frames if f.frame_id in set(self.split.train)]

    def test_frames(self):
        return [f for f in self.frames if f.frame_id in set(self.split.test)]


def _read_intrinsics(path: Path) -> Intrinsics:
    if not path.is_file():
        raise MissingFileError(f"missing {path}")
    tokens = path.read_text().split()
    if len(tokens) != 6:
        raise DimensionMismatchError(f"{path} must hold exactly 6 values, got {len(tokens)}")
    fx, fy, cx, cy = (float(t) for t in tokens[:4])
    width, height = int(tokens[4]), int(tokens[5])
    return Intrinsics(fx, fy, cx, cy, width, height)


def _parse_pose_line(line: str, path: Path) -> tuple:
    tokens = line.split()
    if len(tokens) != 13:
        raise MalformedPoseError(f"{path}: expected frame_id + 12 floats, got {len(tokens)} tokens")
    frame_id = int(tokens[0])
    values = np.array([float(t) for t in tokens[1:]], dtype=np.float64).reshape(3, 4)
    R = values[:, :3]
    t = values[:, 3]
    if np.abs(R @ R.T - np.eye(3)).max() > _ORTHO_TOL:
        raise MalformedPoseError(f"{path}: rotation for frame {frame_id} is not orthonormal")
    if np.linalg.det(R) < 0:
        raise MalformedPoseError(f"{path}: rotation for frame {frame_id} has determinant -1")
    return frame_id, Pose.from_matrix(R, t)


def _read_split_file(path: Path, frame_ids) -> Split:
    if not path.is_file():
        raise MissingFileError(f"missing {path}")
    train, test = [], []
    assigned = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 2 or tokens[1] not in ("train", "test"):
            raise DimensionMismatchError(f"{path}: bad split line {line!r}")
        frame_id = int(tokens[0])
        if frame_id in assigned:
            raise DimensionMismatchError(f"{path}: frame {frame_id} assigned more than once")
        assigned[frame_id] = tokens[1]
        (train if tokens[1] == "train" else test).append(frame_id)
    missing = set(frame_ids) - set(assigned)
    unknown = set(assigned) - set(frame_ids)
    if missing or unknown:
        raise DimensionMismatchError(
            f"{path}: split must partition the frame set (missing {sorted(missing)}, unknown {sorted(unknown)})"
        )
    return Split(tuple(sorted(train)), tuple(sorted(test)))


def load_dataset(root_path, split: Split | None = None) -> DatasetManifest:
    """Read a dataset directory into an immutable manifest.

    split overrides the on-disk split.txt; without either, loading fails.
    LiDAR sweeps are transformed from the frame's camera frame into world
    coordinates at load time.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise MissingFileError(f"dataset root {root} is not a directory")
    images_dir = root / "images"
    poses_path = root / "poses.txt"
    if not images_dir.is_dir():
        raise MissingFileError(f"missing {images_dir}")
    if not poses_path.is_file():
        raise MissingFileError(f"missing {poses_path}")
    intr = _read_intrinsics(root / "intrinsics.txt")

    poses = {}
    for line in poses_path.read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        frame_id, pose = _parse_pose_line(line, poses_path)
        if frame_id in poses:
            raise MalformedPoseError(f"{poses_path}: duplicate frame id {frame_id}")
        poses[frame_id] = pose
    if not poses:
        raise MalformedPoseError(f"{poses_path} holds no poses")

    frame_ids = sorted(poses)
    frames = []
    for frame_id in frame_ids:
        img_path = images_dir / f"{frame_id:06d}.png"
        if not img_path.is_file():
            raise MissingFileError(f"missing {img_path}")
        with Image.open(img_path) as handle:
            image = np.asarray(handle.convert("RGB"), dtype=np.float64) / 255.0
        if image.shape[0] != intr.height or image.shape[1] != intr.width:
            raise DimensionMismatchError(
                f"{img_path} is {image.shape[1]}x{image.shape[0]}, intrinsics say {intr.width}x{intr.height}"
            )
        pose = poses[frame_id]
        sweep = None
        lidar_path = root / "lidar" / f"{frame_id:06d}.bin"
        if lidar_path.is_file():
            raw = np.frombuffer(lidar_path.read_bytes(), dtype="<f4")
            if len(raw) % 4 != 0:
                raise DimensionMismatchError(f"{lidar_path} length is not a multiple of 4 floats")
            pts_ego = raw.reshape(-1, 4)[:, :3].astype(np.float64)
            sweep = PointSweep(pose.apply(pts_ego), source_frame=frame_id)
        frames.append(
            TrainingFrame(
                frame_id=frame_id,
                image=image,
                pose=pose,
                lidar=sweep,
                view=CameraView(intr, pose),
            )
        )

    resolved = split if split is not None else _read_split_file(root / "split.txt", frame_ids)
    if split is not None:
        combined = sorted(resolved.train + resolved.test)
        if combined != frame_ids:
            raise DimensionMismatchError("provided split does not partition the dataset's frame ids")
    return DatasetManifest(intr, tuple(frames), resolved)


def make_split(n_frames: int, drop_rate: float, scheme: str = "alternating", seed: int | None = None) -> Split:
    """Partition frame indices 0..n-1 with |test| = round(drop_rate * n).

    alternating spreads test frames evenly through the sequence; random
    draws them with a seeded generator.
    """
    if not 0.0 < drop_rate < 1.0:
        raise InvalidRateError(f"drop_rate must lie strictly between 0 and 1, got {drop_rate}")
    if n_frames < 2:
        raise DimensionMismatchError("need at least 2 frames to split")
    m = int(np.floor(drop_rate * n_frames + 0.5))
    m = min(max(m, 1), n_frames - 1)
    if scheme == "alternating":
        test = sorted((j + 1) * n_frames // m - 1 for j in range(m))
    elif scheme == "random":
        rng = np.random.default_rng(seed)
        test = sorted(int(i) for i in rng.choice(n_frames, size=m, replace=False))
    else:
        raise ConfigError(f"unknown split scheme {scheme!r}")
    train = [i for i in range(n_frames) if i not in set(test)]
    return Split(tuple(train), tuple(test))


def _pack_array(arr) -> bytes:
    return np.ascontiguousarray(arr).astype("<f4").tobytes()


def save_checkpoint(cloud: GaussianCloud, iteration: int, path) -> None:
    """Write the cloud and iteration counter; loads back bit-exactly."""
    n = len(cloud)
    k = cloud.sh.shape[1]
    header = CHECKPOINT_MAGIC + struct.pack("<IIIQ", FORMAT_VERSION, n, k, int(iteration))
    body = b"".join(
        [
            _pack_array(cloud.means),
            _pack_array(cloud.log_scales),
            _pack_array(cloud.rotations),
            _pack_array(cloud.opacity_logits),
            _pack_array(cloud.sh),
        ]
    )
    Path(path).write_bytes(header + body)


def load_checkpoint(path):
    """Read a checkpoint; returns (cloud, iteration)."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing checkpoint {path}")
    blob = path.read_bytes()
    head_size = 4 + struct.calcsize("<IIIQ")
    if len(blob) < head_size:
        raise CheckpointError(f"{path} is truncated (only {len(blob)} bytes)")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} has bad magic {blob[:4]!r}")
    version, n, k, iteration = struct.unpack_from("<IIIQ", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    counts = [(n, 3), (n, 3), (n, 4), (n,), (n, k, 3)]
    expected = head_size + sum(int(np.prod(shape)) * 4 for shape in counts)
    if len(blob) != expected:
        raise CheckpointError(f"{path} holds {len(blob)} bytes, format requires {expected}")
    offset = head_size
    arrays = []
    for shape in counts:
        size = int(np.prod(shape)) * 4
        arrays.append(np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=offset).reshape(shape))
        offset += size
    means, log_scales, rotations, opacity_logits, sh = arrays
    cloud = GaussianCloud(
        means.astype(np.float32),
        log_scales.astype(np.float32),
        rotations.astype(np.float32),
        opacity_logits.astype(np.float32),
        sh.astype(np.float32),
    )
    return cloud, int(iteration)


def save_point_cloud(cloud: ColoredPointCloud, path) -> None:
    header = POINTCLOUD_MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(cloud))
    Path(path).write_bytes(header + _pack_array(cloud.positions) + _pack_array(cloud.colors))


def load_point_cloud(path) -> ColoredPointCloud:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing point cloud {path}")
    blob = path.read_bytes()
    head_size = 4 + struct.calcsize("<IQ")
    if len(blob) < head_size or blob[:4] != POINTCLOUD_MAGIC:
        raise CheckpointError(f"{path} is not a point-cloud file")
    version, n = struct.unpack_from("<IQ", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    expected = head_size + n * 6 * 4
    if len(blob) != expected:
        raise CheckpointError(f"{path} holds {len(blob)} bytes, format requires {expected}")
    positions = np.frombuffer(blob, dtype="<f4", count=n * 3, offset=head_size).reshape(n, 3)
    colors = np.frombuffer(blob, dtype="<f4", count=n * 3, offset=head_size + n * 12).reshape(n, 3)
    return ColoredPointCloud(positions.astype(np.float64), np.clip(colors.astype(np.float64), 0.0, 1.0))


def load_config(path) -> dict:
    """Parse a key=value config file; '#' starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing config {path}")
    return parse_config_text(path.read_text())


def parse_config_text(text: str) -> dict:
    values = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line without '=': {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values
