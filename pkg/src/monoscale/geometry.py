"""Rigid-pose algebra for camera-to-world poses.

All poses follow the KITTI odometry convention: ``rotation`` and
``translation`` map camera coordinates (x right, y down, z forward) into the
world frame, so the translation *is* the camera center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

ORTHO_TOL = 1e-6


class GeometryError(ValueError):
    """Raised for invalid rotations, rigid transforms or degenerate angles."""


class CameraId(str, Enum):
    LEFT = "left"
    RIGHT = "right"


def _check_rotation(rotation: np.ndarray) -> None:
    if rotation.shape != (3, 3) or not np.all(np.isfinite(rotation)):
        raise GeometryError(f"rotation must be a finite 3x3 matrix, got shape {rotation.shape}")
    ortho = np.abs(rotation.T @ rotation - np.eye(3)).max()
    det = np.linalg.det(rotation)
    if ortho >= ORTHO_TOL or abs(det - 1.0) > ORTHO_TOL:
        raise GeometryError(f"rotation not orthonormal (|RtR-I|={ortho:.2e}, det={det:.6f})")


@dataclass(frozen=True, eq=False)
class PoseSE3:
    rotation: np.ndarray
    translation: np.ndarray
    frame_index: int = 0
    timestamp: float | None = None

    def __post_init__(self) -> None:
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(rot)
        if not np.all(np.isfinite(trans)):
            raise GeometryError("translation must be finite")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls, frame_index: int = 0, timestamp: float | None = None) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3), frame_index, timestamp)

    @classmethod
    def from_matrix(cls, matrix, frame_index: int = 0, timestamp: float | None = None) -> "PoseSE3":
        """Build from a 3x4 or 4x4 homogeneous matrix."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape not in ((3, 4), (4, 4)):
            raise GeometryError(f"expected 3x4 or 4x4 matrix, got {m.shape}")
        if m.shape == (4, 4) and not np.allclose(m[3], [0, 0, 0, 1], atol=ORTHO_TOL):
            raise GeometryError("bottom row of a rigid transform must be [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3], frame_index, timestamp)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self * other``; keeps this pose's frame index and timestamp."""
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            self.frame_index,
            self.timestamp,
        )

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation, self.frame_index, self.timestamp)

    def equals(self, other: "PoseSE3", atol: float = 0.0) -> bool:
        return (
            self.frame_index == other.frame_index
            and np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[PoseSE3, ...]
    sequence_id: str
    camera_id: CameraId = CameraId.LEFT

    def __post_init__(self) -> None:
        poses = tuple(self.poses)
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "camera_id", CameraId(self.camera_id))
        idx = [p.frame_index for p in poses]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise GeometryError(f"frame indices of {self.sequence_id!r} must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i: int) -> PoseSE3:
        return self.poses[i]

    @property
    def frame_indices(self) -> list[int]:
        return [p.frame_index for p in self.poses]

    def centers(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics. Pixel (u, v) with integer coordinates is a pixel center."""

    focal_x: float
    focal_y: float
    principal_point: tuple[float, float]
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self) -> None:
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise GeometryError("focal lengths must be positive")
        w, h = self.image_size
        cx, cy = self.principal_point
        if w <= 0 or h <= 0:
            raise GeometryError("image size must be positive")
        if not (0 <= cx <= w and 0 <= cy <= h):
            raise GeometryError(f"principal point {self.principal_point} outside image {self.image_size}")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def K(self) -> np.ndarray:
        cx, cy = self.principal_point
        return np.array([[self.focal_x, 0.0, cx], [0.0, self.focal_y, cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraModel":
        """Same field of view at ``factor`` times the resolution."""
        cx, cy = self.principal_point
        w, h = self.image_size
        return CameraModel(
            self.focal_x * factor,
            self.focal_y * factor,
            (cx * factor, cy * factor),
            (int(round(w * factor)), int(round(h * factor))),
        )

    def to_dict(self) -> dict:
        cx, cy = self.principal_point
        w, h = self.image_size
        return {"fx": self.focal_x, "fy": self.focal_y, "cx": cx, "cy": cy, "width": w, "height": h}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(float(d["fx"]), float(d["fy"]), (float(d["cx"]), float(d["cy"])), (int(d["width"]), int(d["height"])))


CANONICAL_CAMERA = CameraModel(250.0, 250.0, (140.0, 60.0), (280, 120))


def camera_center(pose: PoseSE3) -> np.ndarray:
    return np.array(pose.translation)


def pair_distance(a: PoseSE3, b: PoseSE3) -> float:
    return float(np.linalg.norm(b.translation - a.translation))


def yaw_change(a: PoseSE3, b: PoseSE3, up: Sequence[float] | None = None) -> float:
    """Angle between the two optical axes after projection on the ground plane.

    ``up`` is the ground-plane normal in world coordinates. When omitted, the
    mean of both cameras' up axes (-y in camera coordinates) is used.
    """
    if up is None:
        n = -(a.rotation[:, 1] + b.rotation[:, 1])
    else:
        n = np.asarray(up, dtype=np.float64)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise GeometryError("ground normal is degenerate")
    n = n / norm
    fa = a.rotation[:, 2] - np.dot(a.rotation[:, 2], n) * n
    fb = b.rotation[:, 2] - np.dot(b.rotation[:, 2], n) * n
    if np.linalg.norm(fa) < 1e-9 or np.linalg.norm(fb) < 1e-9:
        raise GeometryError("forward axis is parallel to the ground normal")
    sin = np.dot(np.cross(fa, fb), n)
    cos = np.dot(fa, fb)
    return abs(math.atan2(sin, cos))


def ground_normal(traj: Trajectory) -> np.ndarray:
    """Least-squares normal of the plane the camera centers move in.

    Falls back to the mean camera up axis when the centers do not span a
    plane (too few frames or a straight line). The returned normal points
    to the same side as the cameras' up axes.
    """
    mean_up = -np.sum([p.rotation[:, 1] for p in traj.poses], axis=0) if traj.poses else np.array([0.0, 0.0, 1.0])
    mean_up = mean_up / max(np.linalg.norm(mean_up), 1e-12)
    centers = traj.centers()
    if len(centers) >= 3:
        x = centers - centers.mean(axis=0)
        _, s, vt = np.linalg.svd(x, full_matrices=True)
        s = np.concatenate([s, np.zeros(3 - len(s))])
        # Require a genuinely two-dimensional spread before trusting the fit.
        if s[0] > 1e-9 and s[1] > 1e-3 * s[0]:
            n = vt[2]
            return n if np.dot(n, mean_up) >= 0 else -n
        if s[0] > 1e-9:
            d = vt[0]
            n = mean_up - np.dot(mean_up, d) * d
            if np.linalg.norm(n) > 1e-9:
                return n / np.linalg.norm(n)
    return mean_up


def yaw_series(traj: Trajectory, up: Sequence[float] | None = None) -> np.ndarray:
    """yaw_change between consecutive poses, using one trajectory-wide normal."""
    n = ground_normal(traj) if up is None else np.asarray(up, dtype=np.float64)
    return np.array([yaw_change(a, b, n) for a, b in zip(traj.poses, traj.poses[1:])])


def rigid_transform(matrix) -> PoseSE3:
    """Validate a 4x4 (or 3x4) rigid transform and wrap it as a pose."""
    return PoseSE3.from_matrix(matrix)


def offset_trajectory(traj: Trajectory, rig_offset, camera_id: CameraId | str | None = None) -> Trajectory:
    """Compose every pose with ``rig_offset`` (the camera's pose in the rig frame).

    An identity offset returns a trajectory whose arrays are bit-identical.
    """
    offset = rig_offset if isinstance(rig_offset, PoseSE3) else rigid_transform(rig_offset)
    cam = traj.camera_id if camera_id is None else CameraId(camera_id)
    if np.array_equal(offset.rotation, np.eye(3)) and not offset.translation.any():
        return Trajectory(traj.poses, traj.sequence_id, cam)
    return Trajectory(tuple(p.compose(offset) for p in traj.poses), traj.sequence_id, cam)


def rotation_about(axis: Iterable[float], angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(list(axis), dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * (kx @ kx)


def vehicle_camera_rotation(heading: float) -> np.ndarray:
    """Camera-to-world rotation for a level camera looking along ``heading``.

    World frame is z-up; the camera looks along (cos h, sin h, 0).
    """
    c, s = math.cos(heading), math.sin(heading)
    forward = np.array([c, s, 0.0])
    right = np.array([s, -c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    return np.column_stack([right, down, forward])
