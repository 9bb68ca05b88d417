"""Camera model, rigid-transform algebra and the pseudo-view sampler.

Conventions: quaternions are (w, x, y, z) with unit norm, poses are
camera-to-world, pixels are (u, v) = (column, row), world is z-up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, NonPositiveDepthError, ShapeMismatchError

# Below this dot product slerp falls back to lerp to avoid a degenerate sin.
_SLERP_DOT_THRESHOLD = 0.9995


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion cannot be normalized")
    return q / n


def quat_multiply(a, b):
    """Hamilton product a*b, both (w, x, y, z)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_about_z(angle):
    """Rotation by `angle` radians about the world z-axis."""
    half = 0.5 * angle
    return np.array([np.cos(half), 0.0, 0.0, np.sin(half)])


def quat_to_rotmat(q):
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R):
    """Largest-eigenvalue extraction; robust near all rotation branches."""
    R = np.asarray(R, dtype=np.float64)
    K = (
        np.array(
            [
                [R[0, 0] - R[1, 1] - R[2, 2], R[1, 0] + R[0, 1], R[2, 0] + R[0, 2], R[2, 1] - R[1, 2]],
                [R[1, 0] + R[0, 1], R[1, 1] - R[0, 0] - R[2, 2], R[2, 1] + R[1, 2], R[0, 2] - R[2, 0]],
                [R[2, 0] + R[0, 2], R[2, 1] + R[1, 2], R[2, 2] - R[0, 0] - R[1, 1], R[1, 0] - R[0, 1]],
                [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1], R[0, 0] + R[1, 1] + R[2, 2]],
            ]
        )
        / 3.0
    )
    eigvals, eigvecs = np.linalg.eigh(K)
    q = eigvecs[[3, 0, 1, 2], np.argmax(eigvals)]
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def slerp(q0, q1, u):
    """Shortest-arc spherical interpolation between unit quaternions."""
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        # q and -q are the same rotation; flip onto the short arc
        q1 = -q1
        dot = -dot
    if dot > _SLERP_DOT_THRESHOLD:
        return quat_normalize(q0 + u * (q1 - q0))
    theta0 = np.arccos(np.clip(dot, -1.0, 1.0))
    theta = theta0 * u
    s1 = np.sin(theta) / np.sin(theta0)
    s0 = np.cos(theta) - dot * s1
    return quat_normalize(s0 * q0 + s1 * q1)


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform: world = R(q) @ cam + t."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = quat_normalize(self.q)
        t = np.asarray(self.t, dtype=np.float64)
        if t.shape != (3,):
            raise ShapeMismatchError(f"translation must be a 3-vector, got {t.shape}")
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R, t):
        return cls(rotmat_to_quat(R), t)

    def rotmat(self):
        return quat_to_rotmat(self.q)

    def apply(self, points):
        """Camera-frame points -> world frame. points: (3,) or (N, 3)."""
        return np.asarray(points, dtype=np.float64) @ self.rotmat().T + self.t

    def apply_inverse(self, points):
        """World-frame points -> camera frame."""
        return (np.asarray(points, dtype=np.float64) - self.t) @ self.rotmat()

    def inverse(self):
        R = self.rotmat()
        w, x, y, z = self.q
        return Pose(np.array([w, -x, -y, -z]), -R.T @ self.t)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class CameraView:
    """Intrinsics plus a camera-to-world pose."""

    intrinsics: Intrinsics
    pose: Pose


def project(view: CameraView, point_world) -> tuple[np.ndarray, float]:
    """Pinhole-project one world point; returns ((u, v), depth).

    Raises BehindCameraError when the camera-frame depth is <= 0.
    """
    pc = view.pose.apply_inverse(np.asarray(point_world, dtype=np.float64))
    z = float(pc[2])
    if z <= 0.0:
        raise BehindCameraError(f"point has non-positive camera depth {z}")
    K = view.intrinsics
    u = K.fx * pc[0] / z + K.cx
    v = K.fy * pc[1] / z + K.cy
    return np.array([u, v]), z


def project_points(view: CameraView, points_world):
    """Vectorized projection of (N, 3) world points.

    Returns (uv (N, 2), depth (N,), in_front (N,) bool). Points with
    depth <= 0 get garbage uv and in_front False; callers must mask.
    """
    pts = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    pc = view.pose.apply_inverse(pts)
    z = pc[:, 2]
    in_front = z > 0.0
    zsafe = np.where(in_front, z, 1.0)
    K = view.intrinsics
    uv = np.empty((len(pts), 2))
    uv[:, 0] = K.fx * pc[:, 0] / zsafe + K.cx
    uv[:, 1] = K.fy * pc[:, 1] / zsafe + K.cy
    return uv, z, in_front


def unproject(view: CameraView, pixel, depth: float):
    """Inverse of project: pixel (u, v) at camera depth -> world point."""
    if depth <= 0.0:
        raise NonPositiveDepthError(f"depth must be positive, got {depth}")
    K = view.intrinsics
    u, v = np.asarray(pixel, dtype=np.float64)
    pc = np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])
    return view.pose.apply(pc)


def interpolate_pose(a: Pose, b: Pose, u: float) -> Pose:
    """Lerped translation, slerped rotation; exact at both endpoints."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"interpolation parameter must be in [0, 1], got {u}")
    if u == 0.0:
        return a
    if u == 1.0:
        return b
    return Pose(slerp(a.q, b.q, u), a.t + u * (b.t - a.t))


def perturb_yaw(pose: Pose, angle: float) -> Pose:
    """Rotate the orientation by `angle` radians about the world z-axis.

    Translation is untouched: the camera stays in place and turns.
    """
    return Pose(quat_multiply(quat_about_z(angle), pose.q), pose.t)


@dataclass(frozen=True)
class PseudoViewConfig:
    delta_max: float  # yaw bound in radians
    count_per_event: int = 4
    cadence: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.delta_max <= np.pi:
            raise ValueError(f"delta_max must be in [0, pi], got {self.delta_max}")
        if self.count_per_event < 1 or self.cadence < 1:
            raise ValueError("count_per_event and cadence must be >= 1")


def sample_pseudo_views(
    anchor: CameraView,
    prev: CameraView,
    next: CameraView,
    cfg: PseudoViewConfig,
    rng: np.random.Generator,
) -> list[CameraView]:
    """Sample cfg.count_per_event views near the anchor.

    Per view, in fixed draw order: u ~ U(0,1) places the position on the
    segment anchor->prev or anchor->next (side picked with probability 1/2),
    and the orientation is the anchor's yawed by theta ~ U[-delta, delta]
    about the world z-axis. Intrinsics are copied from the anchor.
    """
    if prev.intrinsics != anchor.intrinsics or next.intrinsics != anchor.intrinsics:
        raise ShapeMismatchError("anchor/prev/next must share intrinsics")
    views = []
    for _ in range(cfg.count_per_event):
        u = rng.random()
        toward_next = rng.random() < 0.5
        theta = rng.uniform(-cfg.delta_max, cfg.delta_max)
        target = next.pose if toward_next else prev.pose
        # anchored lerp so the degenerate prev=next=anchor case is bit-exact
        position = anchor.pose.t + u * (target.t - anchor.pose.t)
        orientation = quat_multiply(quat_about_z(theta), anchor.pose.q)
        views.append(CameraView(anchor.intrinsics, Pose(orientation, position)))
    return views


def yaw_offset(a: Pose, b: Pose) -> float:
    """Signed yaw angle (radians) taking a's orientation to b's about world z.

    Only meaningful when b = Rz(theta) @ a, i.e. for pseudo views.
    """
    # relative rotation in the world frame
    R = quat_to_rotmat(b.q) @ quat_to_rotmat(a.q).T
    return float(np.arctan2(R[1, 0], R[0, 0]))
