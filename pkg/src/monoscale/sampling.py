"""Training-pair enumeration, turn duplication and LSTM windows."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import CameraId, Trajectory, ground_normal, pair_distance, yaw_change

DEFAULT_D_MAX = 1.7
DEFAULT_TURN_THRESHOLD = 0.01745  # rad per consecutive pair, about 1 degree
DEFAULT_TURN_FACTOR = 2


class Direction(str, Enum):
    UNIDIRECTIONAL = "unidirectional"
    BIDIRECTIONAL = "bidirectional"


@dataclass(frozen=True)
class PairIndex:
    sequence_id: str
    camera_id: CameraId
    i: int
    j: int
    distance_label: float
    is_turning: bool = False


@dataclass(frozen=True)
class PairSamplerConfig:
    d_max: float = DEFAULT_D_MAX
    turn_threshold: float = DEFAULT_TURN_THRESHOLD
    turn_duplication_factor: int = DEFAULT_TURN_FACTOR
    allow_nonconsecutive: bool = True

    def __post_init__(self) -> None:
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")
        if self.turn_duplication_factor < 1:
            raise ValueError("turn_duplication_factor must be >= 1")


@dataclass(frozen=True)
class SequenceWindow:
    pairs: tuple[PairIndex, ...]
    target_position: int

    @property
    def target(self) -> PairIndex:
        return self.pairs[self.target_position]

    def __len__(self) -> int:
        return len(self.pairs)


def enumerate_pairs(traj: Trajectory, cfg: PairSamplerConfig) -> list[PairIndex]:
    """All pairs (i, j), i < j, whose camera centers are at most ``d_max`` apart.

    ``i``/``j`` in the result are frame indices, ordered by i then j. A
    vectorized prefilter with slack selects candidates; the label and the
    final comparison both use :func:`pair_distance`.
    """
    poses = traj.poses
    n = len(poses)
    if n < 2:
        return []
    normal = ground_normal(traj)
    centers = traj.centers()
    out: list[PairIndex] = []
    for a in range(n - 1):
        stop = n if cfg.allow_nonconsecutive else a + 2
        d_vec = np.linalg.norm(centers[a + 1 : stop] - centers[a], axis=1)
        for off in np.flatnonzero(d_vec <= cfg.d_max + 1e-9):
            b = a + 1 + int(off)
            d = pair_distance(poses[a], poses[b])
            if d <= cfg.d_max:
                turning = yaw_change(poses[a], poses[b], normal) > cfg.turn_threshold
                out.append(PairIndex(traj.sequence_id, traj.camera_id, poses[a].frame_index, poses[b].frame_index, d, turning))
    return out


def duplicate_turns(pairs: list[PairIndex], cfg: PairSamplerConfig | int) -> list[PairIndex]:
    factor = cfg if isinstance(cfg, int) else cfg.turn_duplication_factor
    if factor < 1:
        raise ValueError(f"turn duplication factor must be >= 1, got {factor}")
    out: list[PairIndex] = []
    for p in pairs:
        out.extend([p] * (factor if p.is_turning else 1))
    return out


def consecutive_pairs(traj: Trajectory, turn_threshold: float = DEFAULT_TURN_THRESHOLD) -> list[PairIndex]:
    """Every (k, k+1) pair with no distance filter, as used for evaluation."""
    poses = traj.poses
    if len(poses) < 2:
        return []
    normal = ground_normal(traj)
    return [
        PairIndex(traj.sequence_id, traj.camera_id, a.frame_index, b.frame_index, pair_distance(a, b), yaw_change(a, b, normal) > turn_threshold)
        for a, b in zip(poses, poses[1:])
    ]


def window_target(length: int, direction: Direction | str) -> int:
    direction = Direction(direction)
    if length < 1:
        raise ValueError("window length must be >= 1")
    if direction is Direction.BIDIRECTIONAL:
        if length % 2 == 0:
            raise ValueError("bidirectional windows need an odd length 2N+1")
        return (length - 1) // 2
    return length - 1


def windows_from_pairs(pairs: list[PairIndex], length: int, direction: Direction | str) -> list[SequenceWindow]:
    target = window_target(length, direction)
    return [SequenceWindow(tuple(pairs[k : k + length]), target) for k in range(len(pairs) - length + 1)]


def build_windows(traj: Trajectory, length: int, direction: Direction | str) -> list[SequenceWindow]:
    """Stride-1 windows of consecutive pairs from one trajectory."""
    return windows_from_pairs(consecutive_pairs(traj), length, direction)


def training_pairs(trajectories: list[Trajectory], cfg: PairSamplerConfig) -> list[PairIndex]:
    out: list[PairIndex] = []
    for t in trajectories:
        out.extend(duplicate_turns(enumerate_pairs(t, cfg), cfg))
    return out


def train_test_pair_counts(manifest, cfg: PairSamplerConfig) -> dict[str, int]:
    """Pair counts for a manifest; test splits always count consecutive pairs only.

    Returns ``{"split", "pairs", "pairs_augmented"}`` where ``pairs_augmented``
    includes turn duplication (equal to ``pairs`` on test splits).
    """
    split = manifest.split.value
    trajs = manifest.trajectories()
    if split == "test":
        n = sum(max(len(t) - 1, 0) for t in trajs)
        return {"split": split, "pairs": n, "pairs_augmented": n}
    pairs = [p for t in trajs for p in enumerate_pairs(t, cfg)]
    return {"split": split, "pairs": len(pairs), "pairs_augmented": len(duplicate_turns(pairs, cfg))}
