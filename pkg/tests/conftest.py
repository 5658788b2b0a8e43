import math
import os
from pathlib import Path

import numpy as np
import pytest
from PIL import Image
from scipy.spatial.transform import Rotation

from monoscale.geometry import CameraId, PoseSE3, Trajectory, vehicle_camera_rotation
from monoscale.synthgen import DESK_CAMERA, MAP_PRESETS, MotionProfile, build_scene, generate_drive, mono_rig, stereo_rig

KITTI_ROOT = os.environ.get("KITTI_ROOT")


def random_pose(rng: np.random.Generator, frame_index: int = 0, scale: float = 10.0) -> PoseSE3:
    rot = Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()
    return PoseSE3(rot, rng.normal(scale=scale, size=3), frame_index)


def line_trajectory(n: int, spacing: float, heading: float = 0.0, seq: str = "s", cam=CameraId.LEFT) -> Trajectory:
    rot = vehicle_camera_rotation(heading)
    d = np.array([math.cos(heading), math.sin(heading), 0.0])
    return Trajectory(tuple(PoseSE3(rot, d * spacing * k + [0, 0, 1.65], k) for k in range(n)), seq, cam)


def arc_trajectory(n: int, radius: float, dtheta: float, seq: str = "arc") -> Trajectory:
    poses = []
    for k in range(n):
        th = k * dtheta
        poses.append(PoseSE3(vehicle_camera_rotation(th), [radius * math.sin(th), radius * (1 - math.cos(th)), 1.65], k))
    return Trajectory(tuple(poses), seq)


@pytest.fixture(scope="session")
def small_export(tmp_path_factory) -> Path:
    """Two episodes x 12 frames x stereo cameras on map1 at desk resolution."""
    out = tmp_path_factory.mktemp("export") / "map1"
    prof = MotionProfile(((0.6, 8.0, 0.0), (0.5, 6.0, 0.3)))
    generate_drive(build_scene(MAP_PRESETS["map1"]), [prof, prof], stereo_rig(), out, seed=3)
    return out


def write_kitti_fixture(root: Path, seq: str, poses: list[np.ndarray], n_images: int | None = None, size=(1241, 376), rgb=True) -> None:
    """Minimal KITTI odometry layout with real KITTI-00 calibration values."""
    seq_dir = root / "sequences" / seq
    f, cx, cy = 718.856, 607.1928, 185.2157
    calib = {
        "P0": [f, 0, cx, 0, 0, f, cy, 0, 0, 0, 1, 0],
        "P1": [f, 0, cx, -386.1448, 0, f, cy, 0, 0, 0, 1, 0],
        "P2": [f, 0, cx, 45.38225, 0, f, cy, -0.1130887, 0, 0, 1, 0.003779761],
        "P3": [f, 0, cx, -337.2877, 0, f, cy, 2.369057, 0, 0, 1, 0.004915215],
    }
    seq_dir.mkdir(parents=True, exist_ok=True)
    (seq_dir / "calib.txt").write_text("".join(f"{k}: " + " ".join(repr(float(v)) for v in vals) + "\n" for k, vals in calib.items()))
    (seq_dir / "times.txt").write_text("".join(f"{0.1 * k:e}\n" for k in range(len(poses))))
    (root / "poses").mkdir(parents=True, exist_ok=True)
    (root / "poses" / f"{seq}.txt").write_text("".join(" ".join(repr(float(v)) for v in m.ravel()) + "\n" for m in poses))
    n = len(poses) if n_images is None else n_images
    rng = np.random.default_rng(0)
    for d in ("image_2", "image_3"):
        (seq_dir / d).mkdir(exist_ok=True)
        for k in range(n):
            arr = np.full((size[1], size[0], 3) if rgb else (size[1], size[0]), k, dtype=np.uint8)
            arr[:4, :4] = rng.integers(0, 256, size=arr[:4, :4].shape, dtype=np.uint8)
            Image.fromarray(arr).save(seq_dir / d / f"{k:06d}.png")


ACCEPTANCE: dict[str, tuple[str, str]] = {}


def record_criterion(key: str, passed: bool | None, detail: str) -> None:
    """Store one acceptance outcome; ``None`` means skipped."""
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    ACCEPTANCE[key] = (status, detail)
    print(f"{key}: {status} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[1])):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {status}  {detail}")
