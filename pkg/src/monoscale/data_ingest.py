"""KITTI odometry and simulator-export readers, plus dataset manifests.

Simulator-export layout (``format_version`` 1)::

    root/
      meta.json
      episodes/<episode_id>/poses.csv
      episodes/<episode_id>/images/<camera_id>/<frame_index:06d>.png

``meta.json`` holds ``format_version``, ``map_tag``, ``camera_models``
(``{camera_id: {fx, fy, cx, cy, width, height}}``) and ``rig_offsets``
(``{camera_id: 4x4 row-major}``). Each ``poses.csv`` row is one frame of one
camera with a row-major camera-to-world rotation and translation in meters.
"""

from __future__ import annotations

import csv
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .geometry import CameraId, CameraModel, GeometryError, PoseSE3, Trajectory, offset_trajectory

FORMAT_VERSION = 1
MANIFEST_VERSION = 1
POSE_COLUMNS = (
    ["frame_index", "camera_id", "timestamp"]
    + [f"r{i}{j}" for i in range(3) for j in range(3)]
    + ["tx", "ty", "tz", "weather_tag"]
)

KITTI_TRAIN = ["01", "03", "04", "05", "06", "07", "09", "10"]
KITTI_TEST = ["00", "02", "08"]
KITTI_IMAGE_DIRS = {CameraId.LEFT: ("image_2", "P2"), CameraId.RIGHT: ("image_3", "P3")}


class DataError(Exception):
    """Raised for malformed or inconsistent datasets."""


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class Origin(str, Enum):
    KITTI = "kitti"
    SIMULATOR_EXPORT = "simulator_export"
    SYNTHGEN = "synthgen"


@dataclass(frozen=True)
class FrameRecord:
    sequence_id: str
    camera_id: CameraId
    frame_index: int
    image_path: str
    pose: PoseSE3
    source_camera: CameraModel
    weather_tag: str | None = None
    map_tag: str | None = None

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.sequence_id, CameraId(self.camera_id).value, self.frame_index)

    def to_dict(self) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "camera_id": CameraId(self.camera_id).value,
            "frame_index": self.frame_index,
            "image_path": self.image_path,
            "timestamp": self.pose.timestamp,
            "rotation": self.pose.rotation.ravel().tolist(),
            "translation": self.pose.translation.tolist(),
            "source_camera": self.source_camera.to_dict(),
            "weather_tag": self.weather_tag,
            "map_tag": self.map_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrameRecord":
        pose = PoseSE3(np.array(d["rotation"]).reshape(3, 3), d["translation"], int(d["frame_index"]), d.get("timestamp"))
        return cls(
            d["sequence_id"],
            CameraId(d["camera_id"]),
            int(d["frame_index"]),
            d["image_path"],
            pose,
            CameraModel.from_dict(d["source_camera"]),
            d.get("weather_tag"),
            d.get("map_tag"),
        )


@dataclass
class DatasetManifest:
    frames: list[FrameRecord] = field(default_factory=list)
    split: Split = Split.TRAIN
    origin: Origin = Origin.KITTI

    def __post_init__(self) -> None:
        self.split = Split(self.split)
        self.origin = Origin(self.origin)
        self.frames = _sort_frames(self.frames)

    def __len__(self) -> int:
        return len(self.frames)

    def groups(self) -> dict[tuple[str, CameraId], list[FrameRecord]]:
        out: dict[tuple[str, CameraId], list[FrameRecord]] = {}
        for f in self.frames:
            out.setdefault((f.sequence_id, CameraId(f.camera_id)), []).append(f)
        return out

    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(tuple(f.pose for f in fs), seq, cam) for (seq, cam), fs in self.groups().items()]

    def lookup(self) -> dict[tuple[str, str, int], FrameRecord]:
        return {f.key: f for f in self.frames}

    def map_tags(self) -> list[str]:
        return sorted({f.map_tag for f in self.frames if f.map_tag is not None})

    def filter_maps(self, tags: Iterable[str]) -> "DatasetManifest":
        keep = set(tags)
        return DatasetManifest([f for f in self.frames if f.map_tag in keep], self.split, self.origin)

    def to_json(self) -> str:
        doc = {
            "manifest_version": MANIFEST_VERSION,
            "split": self.split.value,
            "origin": self.origin.value,
            "frames": [f.to_dict() for f in self.frames],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        if doc.get("manifest_version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {doc.get('manifest_version')!r}")
        return cls([FrameRecord.from_dict(d) for d in doc["frames"]], doc["split"], doc["origin"])


def _sort_frames(frames: list[FrameRecord]) -> list[FrameRecord]:
    seen = set()
    for f in frames:
        if f.key in seen:
            raise DataError(f"duplicate frame {f.key}")
        seen.add(f.key)
    # Group order follows first appearance; frames sorted within a group.
    order: dict[tuple[str, str], int] = {}
    for f in frames:
        order.setdefault(f.key[:2], len(order))
    return sorted(frames, key=lambda f: (order[f.key[:2]], f.frame_index))


def concat_manifests(manifests: Iterable[DatasetManifest]) -> DatasetManifest:
    ms = list(manifests)
    if not ms:
        return DatasetManifest()
    origins = {m.origin for m in ms}
    origin = ms[0].origin if len(origins) == 1 else Origin.SIMULATOR_EXPORT
    return DatasetManifest([f for m in ms for f in m.frames], ms[0].split, origin)


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Decode an 8-bit RGB image to ``uint8[H, W, 3]``. Grayscale is rejected."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA"):
            raise DataError(f"{path}: expected a 3-channel RGB image, got mode {im.mode}")
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr


def image_size(path: str | os.PathLike) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


# -- KITTI -------------------------------------------------------------------


def kitti_split_presets() -> tuple[list[str], list[str]]:
    return list(KITTI_TRAIN), list(KITTI_TEST)


def parse_kitti_poses(path: str | os.PathLike) -> list[np.ndarray]:
    """One row-major 3x4 matrix per line; errors name the 1-based line number."""
    mats = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                vals = [float(v) for v in line.split()]
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-numeric pose entry") from None
            if len(vals) != 12 or not np.all(np.isfinite(vals)):
                raise DataError(f"{path}: line {lineno}: expected 12 finite values, got {len(vals)}")
            mats.append(np.array(vals).reshape(3, 4))
    return mats


def parse_kitti_calib(path: str | os.PathLike) -> dict[str, np.ndarray]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if ":" not in line:
                continue
            key, rest = line.split(":", 1)
            vals = rest.split()
            if len(vals) == 12:
                out[key.strip()] = np.array([float(v) for v in vals]).reshape(3, 4)
    return out


def projection_offset(P: np.ndarray) -> np.ndarray:
    """Camera pose relative to the reference (cam0) frame from a rectified
    projection matrix ``P = K [I | t]``: the center sits at ``-K^-1 P[:, 3]``."""
    t = np.linalg.solve(P[:, :3], P[:, 3])
    off = np.eye(4)
    off[:3, 3] = -t
    return off


def read_kitti(root_dir: str | os.PathLike, sequence_ids: Iterable[str], cameras: Iterable[str | CameraId] = ("left", "right"), split: Split | str = Split.TRAIN) -> DatasetManifest:
    """Read a KITTI odometry tree (``sequences/XX/image_{2,3}``, ``calib.txt``,
    ``times.txt``, ``poses/XX.txt``) into a manifest.

    The pose file describes the reference camera; each color camera's poses are
    obtained by composing with its offset from the calibration matrices.
    """
    root = Path(root_dir)
    cams = sorted({CameraId(c) for c in cameras}, key=lambda c: c.value)
    frames: list[FrameRecord] = []
    for seq in sequence_ids:
        seq_dir = root / "sequences" / seq
        pose_file = root / "poses" / f"{seq}.txt"
        if not pose_file.is_file():
            raise DataError(f"sequence {seq}: missing ground-truth pose file {pose_file}")
        mats = parse_kitti_poses(pose_file)
        calib = parse_kitti_calib(seq_dir / "calib.txt")
        times_file = seq_dir / "times.txt"
        times = [float(t) for t in times_file.read_text().split()] if times_file.is_file() else [None] * len(mats)
        base = Trajectory(tuple(PoseSE3.from_matrix(m, i, times[i] if i < len(times) else None) for i, m in enumerate(mats)), seq)
        for cam in cams:
            img_dir_name, pkey = KITTI_IMAGE_DIRS[cam]
            if pkey not in calib:
                raise DataError(f"sequence {seq}: calibration lacks {pkey}")
            P = calib[pkey]
            images = sorted((seq_dir / img_dir_name).glob("*.png"))
            if len(images) != len(mats):
                raise DataError(f"sequence {seq}: {len(images)} {cam.value} images but {len(mats)} poses")
            if not images:
                continue
            w, h = image_size(images[0])
            model = CameraModel(P[0, 0], P[1, 1], (P[0, 2], P[1, 2]), (w, h))
            traj = offset_trajectory(base, projection_offset(P), cam)
            for path, pose in zip(images, traj.poses):
                frames.append(FrameRecord(seq, cam, pose.frame_index, str(path), pose, model))
    return DatasetManifest(frames, split, Origin.KITTI)


# -- simulator export --------------------------------------------------------


def read_simulator_export(root_dir: str | os.PathLike, split: Split | str = Split.TRAIN, origin: Origin | str = Origin.SIMULATOR_EXPORT) -> DatasetManifest:
    """Each episode becomes its own sequence id ``<map_tag>/<episode_id>``."""
    root = Path(root_dir)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"{root}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{root}: unsupported format_version {meta.get('format_version')!r}")
    map_tag = meta["map_tag"]
    models = {cid: CameraModel.from_dict(d) for cid, d in meta["camera_models"].items()}
    ep_root = root / "episodes"
    if not ep_root.is_dir():
        raise DataError(f"{root}: missing episodes/ directory")
    frames: list[FrameRecord] = []
    for ep_dir in sorted(p for p in ep_root.iterdir() if p.is_dir()):
        pose_csv = ep_dir / "poses.csv"
        if not pose_csv.is_file():
            raise DataError(f"episode {ep_dir.name}: missing poses.csv")
        last: dict[str, int] = {}
        with open(pose_csv, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != POSE_COLUMNS:
                raise DataError(f"episode {ep_dir.name}: unexpected poses.csv header {reader.fieldnames}")
            for lineno, row in enumerate(reader, start=2):
                cid = row["camera_id"]
                if cid not in models:
                    raise DataError(f"episode {ep_dir.name}: line {lineno}: unknown camera {cid!r}")
                idx = int(row["frame_index"])
                if cid in last and idx <= last[cid]:
                    raise DataError(f"episode {ep_dir.name}: line {lineno}: frame indices not increasing for {cid}")
                last[cid] = idx
                rot = np.array([float(row[f"r{i}{j}"]) for i in range(3) for j in range(3)]).reshape(3, 3)
                trans = [float(row["tx"]), float(row["ty"]), float(row["tz"])]
                ts = float(row["timestamp"]) if row["timestamp"] else None
                try:
                    pose = PoseSE3(rot, trans, idx, ts)
                except GeometryError as exc:
                    raise DataError(f"episode {ep_dir.name}: line {lineno}: {exc}") from exc
                img = ep_dir / "images" / cid / f"{idx:06d}.png"
                if not img.is_file():
                    raise DataError(f"episode {ep_dir.name}: missing image {img}")
                frames.append(
                    FrameRecord(f"{map_tag}/{ep_dir.name}", CameraId(cid), idx, str(img), pose, models[cid], row["weather_tag"] or None, map_tag)
                )
    return DatasetManifest(frames, split, origin)


def format_float(x: float) -> str:
    return repr(float(x))


def write_export_meta(root_dir: str | os.PathLike, map_tag: str, camera_models: dict[str, CameraModel], rig_offsets: dict[str, np.ndarray]) -> None:
    root = Path(root_dir)
    (root / "episodes").mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "map_tag": map_tag,
        "camera_models": {cid: m.to_dict() for cid, m in sorted(camera_models.items())},
        "rig_offsets": {cid: np.asarray(o, dtype=float).reshape(4, 4).tolist() for cid, o in sorted(rig_offsets.items())},
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def write_episode(root_dir: str | os.PathLike, episode_id: str, rows: list[tuple[str, PoseSE3, str, np.ndarray]]) -> None:
    """Write one episode. ``rows`` holds ``(camera_id, pose, weather_tag, rgb_uint8)``
    ordered by frame index then camera."""
    ep = Path(root_dir) / "episodes" / episode_id
    ep.mkdir(parents=True, exist_ok=True)
    with open(ep / "poses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSE_COLUMNS)
        for cid, pose, weather, rgb in rows:
            w.writerow(
                [pose.frame_index, cid, "" if pose.timestamp is None else format_float(pose.timestamp)]
                + [format_float(v) for v in pose.rotation.ravel()]
                + [format_float(v) for v in pose.translation]
                + [weather]
            )
            img_dir = ep / "images" / cid
            img_dir.mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB").save(img_dir / f"{pose.frame_index:06d}.png", optimize=False)


def find_exports(root_dir: str | os.PathLike) -> list[Path]:
    """Export roots (directories holding meta.json) at or below ``root_dir``."""
    root = Path(root_dir)
    if (root / "meta.json").is_file():
        return [root]
    return sorted(p.parent for p in root.rglob("meta.json"))
