"""Procedural synthetic drives rendered with a small software ray caster.

World frame is z-up with the ground plane at z = 0. The vehicle reference
point is the rear-axle center on the ground; cameras are rigidly mounted at
an offset from it, so turning moves an offset camera along a larger arc.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_ingest import write_episode, write_export_meta
from .geometry import CameraModel, PoseSE3, rotation_about, vehicle_camera_rotation

MAX_FRAME_DISPLACEMENT = 5.0
NEAR_CLIP = 0.3
CULL_RADIUS = 120.0


class DriveError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    map_tag: str = "map1"
    extent: float = 300.0  # half side length of the square world, meters
    ground_colors: tuple[tuple[float, float, float], tuple[float, float, float]] = ((0.35, 0.33, 0.30), (0.62, 0.60, 0.55))
    checker_size: float = 2.0
    checker_strength: float = 0.3
    noise_cells: tuple[float, ...] = (0.35, 0.9, 2.5)
    noise_strength: float = 0.7
    box_density: float = 0.4  # boxes per 1000 m^2
    box_size_range: tuple[float, float] = (1.0, 4.0)
    box_height_range: tuple[float, float] = (1.0, 6.0)
    post_density: float = 0.3  # thin posts per 1000 m^2
    sky_color: tuple[float, float, float] = (0.62, 0.75, 0.92)

    @property
    def area(self) -> float:
        return (2 * self.extent) ** 2

    def expected_counts(self) -> tuple[int, int]:
        return int(round(self.box_density * self.area / 1000.0)), int(round(self.post_density * self.area / 1000.0))


@dataclass(frozen=True, eq=False)
class Scene:
    spec: SceneSpec
    box_min: np.ndarray  # [N, 3]
    box_max: np.ndarray  # [N, 3]
    box_color: np.ndarray  # [N, 3]

    @property
    def n_primitives(self) -> int:
        return len(self.box_min)

    def primitives(self) -> list[tuple[tuple[float, ...], tuple[float, ...], tuple[float, ...]]]:
        return [(tuple(a), tuple(b), tuple(c)) for a, b, c in zip(self.box_min.tolist(), self.box_max.tolist(), self.box_color.tolist())]


@dataclass(frozen=True)
class Weather:
    tag: str = "clear"
    brightness: float = 1.0
    visibility: float = 400.0  # meters; haze blends toward the sky color


WEATHER_PRESETS = (
    Weather("clear", 1.0, 400.0),
    Weather("bright", 1.15, 300.0),
    Weather("overcast", 0.85, 150.0),
    Weather("hazy", 0.95, 60.0),
    Weather("dusk", 0.7, 200.0),
)


@dataclass(frozen=True)
class MotionProfile:
    """Piecewise-constant (duration s, speed m/s, yaw rate rad/s) segments."""

    segments: tuple[tuple[float, float, float], ...]
    frame_interval: float = 0.1
    yaw_rate_noise: float = 0.0  # std of per-interval yaw-rate perturbation, rad/s
    noise_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(tuple(float(v) for v in s) for s in self.segments))
        if not self.segments:
            raise DriveError("motion profile needs at least one segment")
        for dur, speed, _ in self.segments:
            if dur <= 0 or speed < 0:
                raise DriveError(f"invalid segment duration {dur} / speed {speed}")
        if self.frame_interval <= 0:
            raise DriveError("frame interval must be positive")

    @property
    def duration(self) -> float:
        return sum(s[0] for s in self.segments)

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.duration / self.frame_interval + 1e-9)) + 1


@dataclass(frozen=True)
class RigCamera:
    camera_id: str
    model: CameraModel
    forward: float = 0.0  # meters ahead of the rear axle
    left: float = 0.0
    height: float = 1.65
    pitch: float = 0.0  # radians, positive tilts the optical axis down

    def offset(self) -> PoseSE3:
        """Camera pose in the vehicle frame (x forward, y left, z up)."""
        rot = vehicle_camera_rotation(0.0)
        if self.pitch:
            rot = rotation_about([0.0, 1.0, 0.0], self.pitch) @ rot
        return PoseSE3(rot, [self.forward, self.left, self.height])


DESK_CAMERA = CameraModel(125.0, 125.0, (70.0, 30.0), (140, 60))


def stereo_rig(model: CameraModel = DESK_CAMERA, forward: float = 1.0, baseline: float = 0.54, height: float = 1.65) -> tuple[RigCamera, ...]:
    half = baseline / 2
    return (RigCamera("left", model, forward, half, height), RigCamera("right", model, forward, -half, height))


def mono_rig(model: CameraModel = DESK_CAMERA, forward: float = 1.0, height: float = 1.65) -> tuple[RigCamera, ...]:
    return (RigCamera("left", model, forward, 0.0, height),)


MAP_PRESETS: dict[str, SceneSpec] = {
    "map1": SceneSpec(seed=101, map_tag="map1"),
    "map2": SceneSpec(
        seed=202, map_tag="map2", ground_colors=((0.30, 0.34, 0.28), (0.55, 0.60, 0.50)), checker_size=2.5, noise_cells=(0.4, 1.0, 3.0),
    ),
    "map3": SceneSpec(
        seed=303, map_tag="map3", ground_colors=((0.25, 0.25, 0.27), (0.70, 0.70, 0.72)), checker_size=3.5, checker_strength=0.5,
        noise_cells=(0.3, 0.8, 2.0), noise_strength=0.6, box_density=0.8, sky_color=(0.70, 0.72, 0.78),
    ),
    "map4": SceneSpec(
        seed=404, map_tag="map4", ground_colors=((0.45, 0.35, 0.22), (0.75, 0.62, 0.42)), checker_size=1.5, checker_strength=0.2,
        noise_cells=(0.5, 1.2), noise_strength=0.8, box_density=0.2, post_density=0.8, sky_color=(0.80, 0.78, 0.70),
    ),
    "map5": SceneSpec(
        seed=505, map_tag="map5", ground_colors=((0.20, 0.28, 0.35), (0.50, 0.62, 0.70)), checker_size=4.0, checker_strength=0.4,
        noise_cells=(0.3, 0.7, 1.6, 4.0), noise_strength=0.65, box_density=1.0, box_height_range=(2.0, 10.0), sky_color=(0.55, 0.65, 0.85),
    ),
    "map6": SceneSpec(
        seed=606, map_tag="map6", ground_colors=((0.38, 0.30, 0.36), (0.68, 0.58, 0.64)), checker_size=3.0, checker_strength=0.35,
        noise_cells=(0.45, 1.1, 2.8), noise_strength=0.7, box_density=0.5, post_density=0.5, sky_color=(0.75, 0.80, 0.90),
    ),
}


# -- scene ---------------------------------------------------------------------


def build_scene(spec: SceneSpec) -> Scene:
    """Scatter boxes and thin posts uniformly over the world square."""
    rng = np.random.default_rng(spec.seed)
    n_box, n_post = spec.expected_counts()
    e = spec.extent
    xy = rng.uniform(-e, e, size=(n_box, 2))
    size = rng.uniform(*spec.box_size_range, size=(n_box, 2))
    height = rng.uniform(*spec.box_height_range, size=n_box)
    colors = rng.uniform(0.15, 0.9, size=(n_box, 3))
    pxy = rng.uniform(-e, e, size=(n_post, 2))
    pheight = rng.uniform(2.0, 5.0, size=n_post)
    pcolors = rng.uniform(0.05, 0.5, size=(n_post, 3))
    mins = np.concatenate([np.column_stack([xy - size / 2, np.zeros(n_box)]), np.column_stack([pxy - 0.1, np.zeros(n_post)])])
    maxs = np.concatenate([np.column_stack([xy + size / 2, height]), np.column_stack([pxy + 0.1, pheight])])
    cols = np.concatenate([colors, pcolors])
    for a in (mins, maxs, cols):
        a.setflags(write=False)
    return Scene(spec, mins, maxs, cols)


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1)."""
    h = (ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)) ^ (
        iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
    )
    h ^= np.uint64(seed * 0x165667B19E3779F9 & 0xFFFFFFFFFFFFFFFF)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(x: np.ndarray, y: np.ndarray, cell: float, seed: int) -> np.ndarray:
    gx, gy = x / cell, y / cell
    ix, iy = np.floor(gx), np.floor(gy)
    fx, fy = gx - ix, gy - iy
    fx = fx * fx * (3 - 2 * fx)
    fy = fy * fy * (3 - 2 * fy)
    v00 = _hash01(ix, iy, seed)
    v10 = _hash01(ix + 1, iy, seed)
    v01 = _hash01(ix, iy + 1, seed)
    v11 = _hash01(ix + 1, iy + 1, seed)
    return (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy


def ground_color(spec: SceneSpec, x: np.ndarray, y: np.ndarray, footprint: np.ndarray) -> np.ndarray:
    """Ground albedo at world points; detail finer than ``footprint`` (meters
    per pixel) fades to its mean to limit aliasing."""
    t = np.full(x.shape, 0.5)
    if spec.checker_strength:
        s = spec.checker_size
        chk = ((np.floor(x / s) + np.floor(y / s)) % 2).astype(np.float64)
        w = np.clip(2.0 - 2.0 * footprint / s, 0.0, 1.0)
        t += spec.checker_strength * (chk - 0.5) * w
    if spec.noise_strength and spec.noise_cells:
        share = spec.noise_strength / len(spec.noise_cells)
        for k, cell in enumerate(spec.noise_cells):
            w = np.clip(2.0 - 2.0 * footprint / cell, 0.0, 1.0)
            t += share * (_value_noise(x, y, cell, spec.seed * 31 + k) - 0.5) * w * 2.0
    t = np.clip(t, 0.0, 1.0)[..., None]
    c0 = np.asarray(spec.ground_colors[0])
    c1 = np.asarray(spec.ground_colors[1])
    return c0 * (1 - t) + c1 * t


# -- rendering -----------------------------------------------------------------

FACE_SHADE = np.array([0.8, 0.65, 1.0])  # x-facing, y-facing, top


def _sample_offsets(supersample: int) -> np.ndarray:
    return (np.arange(supersample) + 0.5) / supersample - 0.5


def render_view(scene: Scene, pose: PoseSE3, camera: CameraModel, weather: Weather = Weather(), supersample: int = 2) -> np.ndarray:
    """Render ``uint8[H, W, 3]`` by casting one ray per subpixel sample."""
    w, h = camera.image_size
    off = _sample_offsets(supersample)
    us = (np.arange(w)[:, None] + off[None, :]).ravel()
    vs = (np.arange(h)[:, None] + off[None, :]).ravel()
    uu, vv = np.meshgrid(us, vs)
    cx, cy = camera.principal_point
    d_cam = np.stack([(uu - cx) / camera.focal_x, (vv - cy) / camera.focal_y, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    d = d_cam @ pose.rotation.T
    o = pose.translation
    sky = np.asarray(scene.spec.sky_color, dtype=np.float64)
    n = len(d)
    color = np.broadcast_to(sky, (n, 3)).copy()
    t_hit = np.full(n, np.inf)
    pix_angle = 1.0 / camera.focal_x

    # Ground plane z = 0, seen from above only.
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(d[:, 2] < 0, -o[2] / d[:, 2], np.inf)
    tg[tg < NEAR_CLIP] = np.inf
    g = np.isfinite(tg)
    if o[2] > 0 and g.any():
        p = o + d[g] * tg[g, None]
        ray_len = np.linalg.norm(d[g], axis=1)
        dist = tg[g] * ray_len
        grazing = np.abs(d[g, 2]) / ray_len
        footprint = dist * pix_angle / np.maximum(grazing, 1e-3)
        color[g] = ground_color(scene.spec, p[:, 0], p[:, 1], footprint)
        t_hit[g] = tg[g]

    # Axis-aligned boxes via the slab test, each restricted to the rays inside
    # its projected bounding rectangle.
    t_img = t_hit.reshape(len(vs), len(us))
    c_img = color.reshape(len(vs), len(us), 3)
    d_img = d.reshape(len(vs), len(us), 3)
    centers = (scene.box_min + scene.box_max) / 2
    near = np.flatnonzero(np.linalg.norm(centers[:, :2] - o[:2], axis=1) < CULL_RADIUS)
    for b in near:
        lo_b, hi_b = scene.box_min[b], scene.box_max[b]
        corners = np.array([[x, y, z] for x in (lo_b[0], hi_b[0]) for y in (lo_b[1], hi_b[1]) for z in (lo_b[2], hi_b[2])])
        pc = (corners - o) @ pose.rotation
        if (pc[:, 2] < NEAR_CLIP).all():
            continue
        if (pc[:, 2] < NEAR_CLIP).any():
            r0, r1, c0, c1 = 0, len(vs), 0, len(us)
        else:
            u = cx + camera.focal_x * pc[:, 0] / pc[:, 2]
            v = cy + camera.focal_y * pc[:, 1] / pc[:, 2]
            c0, c1 = np.searchsorted(us, u.min() - 1), np.searchsorted(us, u.max() + 1)
            r0, r1 = np.searchsorted(vs, v.min() - 1), np.searchsorted(vs, v.max() + 1)
            if c0 >= c1 or r0 >= r1:
                continue
        dd = d_img[r0:r1, c0:c1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo_b - o) / dd
            t2 = (hi_b - o) / dd
        # Rays parallel to a slab: inside -> unbounded, outside -> no hit.
        par = dd == 0
        inside = (o >= lo_b) & (o <= hi_b)
        t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        tmin = lo.max(axis=2)
        tmax = hi.min(axis=2)
        hit = (tmax >= tmin) & (tmin >= NEAR_CLIP) & (tmin < t_img[r0:r1, c0:c1])
        if hit.any():
            face = lo[hit].argmax(axis=1)
            c_img[r0:r1, c0:c1][hit] = scene.box_color[b] * FACE_SHADE[face][:, None]
            t_img[r0:r1, c0:c1][hit] = tmin[hit]

    hit_any = np.isfinite(t_hit)
    if hit_any.any():
        dist = t_hit[hit_any] * np.linalg.norm(d[hit_any], axis=1)
        fog = 1.0 - np.exp(-dist / weather.visibility)
        color[hit_any] = color[hit_any] * (1 - fog[:, None]) + sky * fog[:, None]
    color *= weather.brightness
    img = color.reshape(h, supersample, w, supersample, 3).mean(axis=(1, 3))
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- motion --------------------------------------------------------------------


def _advance(x: float, y: float, th: float, v: float, w: float, tau: float) -> tuple[float, float, float]:
    """Exact unicycle integration for constant speed and yaw rate."""
    if abs(w) < 1e-12:
        return x + v * tau * math.cos(th), y + v * tau * math.sin(th), th
    th2 = th + w * tau
    r = v / w
    return x + r * (math.sin(th2) - math.sin(th)), y - r * (math.cos(th2) - math.cos(th)), th2


def integrate_profile(profile: MotionProfile, start: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Rear-axle states ``[n_frames, 3]`` as (x, y, heading) at each frame time."""
    dt = profile.frame_interval
    n = profile.n_frames
    rng = np.random.default_rng(profile.noise_seed)
    noise = rng.normal(0.0, profile.yaw_rate_noise, size=max(n - 1, 0)) if profile.yaw_rate_noise > 0 else np.zeros(max(n - 1, 0))
    bounds = np.cumsum([s[0] for s in profile.segments])
    states = np.zeros((n, 3))
    x, y, th = start
    states[0] = start
    seg = 0
    t = 0.0
    for k in range(1, n):
        t_end = k * dt
        while t < t_end - 1e-12:
            while seg < len(bounds) - 1 and t >= bounds[seg] - 1e-12:
                seg += 1
            stop = min(t_end, bounds[seg]) if seg < len(bounds) - 1 else t_end
            _, v, w = profile.segments[seg]
            x, y, th = _advance(x, y, th, v, w + noise[k - 1], stop - t)
            t = stop
        states[k] = (x, y, th)
    return states


def vehicle_pose(state) -> PoseSE3:
    x, y, th = state
    return PoseSE3(rotation_about([0.0, 0.0, 1.0], th), [x, y, 0.0])


def camera_poses(states: np.ndarray, cam: RigCamera, frame_interval: float) -> list[PoseSE3]:
    off = cam.offset()
    out = []
    for k, s in enumerate(states):
        p = vehicle_pose(s).compose(off)
        out.append(PoseSE3(p.rotation, p.translation, k, round(k * frame_interval, 9)))
    return out


def check_displacement(states: np.ndarray, rig: Sequence[RigCamera], frame_interval: float) -> None:
    for cam in rig:
        c = np.array([p.translation for p in camera_poses(states, cam, frame_interval)])
        if len(c) > 1:
            step = np.linalg.norm(np.diff(c, axis=0), axis=1).max()
            if step > MAX_FRAME_DISPLACEMENT:
                raise DriveError(f"per-frame displacement {step:.2f} m exceeds {MAX_FRAME_DISPLACEMENT} m")


def _path_clear(scene: Scene, states: np.ndarray, margin: float) -> bool:
    e = scene.spec.extent - 20.0
    if np.abs(states[:, :2]).max() > e:
        return False
    if scene.n_primitives == 0:
        return True
    pts = states[:, :2]
    lo = scene.box_min[None, :, :2] - margin
    hi = scene.box_max[None, :, :2] + margin
    inside = ((pts[:, None] >= lo) & (pts[:, None] <= hi)).all(axis=2)
    return not inside.any()


def choose_start(scene: Scene, profile: MotionProfile, rng: np.random.Generator, margin: float = 4.0, tries: int = 200) -> tuple[float, float, float]:
    """Random start pose whose whole path stays clear of primitives."""
    rel = integrate_profile(profile)
    reach = np.linalg.norm(rel[:, :2], axis=1).max() + 25.0
    lim = max(scene.spec.extent - reach, 1.0)
    start = (0.0, 0.0, 0.0)
    for _ in range(tries):
        start = (float(rng.uniform(-lim, lim)), float(rng.uniform(-lim, lim)), float(rng.uniform(-math.pi, math.pi)))
        if _path_clear(scene, integrate_profile(profile, start), margin):
            return start
    return start


def random_profile(rng: np.random.Generator, duration: float, speed_range=(3.0, 15.0), yaw_rate_range=(-0.25, 0.25), segment_range=(1.0, 3.0), turn_probability: float = 0.4, frame_interval: float = 0.1, smooth: bool = False) -> MotionProfile:
    """Piecewise-constant random profile; ``smooth`` ramps speed between
    segment targets in frame-interval steps."""
    segs: list[tuple[float, float, float]] = []
    t = 0.0
    v_prev = float(rng.uniform(*speed_range))
    while t < duration - 1e-9:
        dur = min(float(rng.uniform(*segment_range)), duration - t)
        v = float(rng.uniform(*speed_range))
        w = float(rng.uniform(*yaw_rate_range)) if rng.random() < turn_probability else 0.0
        if smooth:
            steps = max(int(round(dur / frame_interval)), 1)
            for s in range(steps):
                a = (s + 1) / steps
                segs.append((dur / steps, v_prev + (v - v_prev) * a, w))
        else:
            segs.append((dur, v, w))
        v_prev = v
        t += dur
    return MotionProfile(tuple(segs), frame_interval)


# -- export --------------------------------------------------------------------


def generate_drive(
    scene: Scene,
    profiles: MotionProfile | Sequence[MotionProfile],
    cameras: Sequence[RigCamera],
    out_dir: str | Path,
    seed: int = 0,
    weather: Weather | Sequence[Weather] | None = None,
    starts: Sequence[tuple[float, float, float]] | None = None,
    supersample: int = 2,
    workers: int = 1,
) -> Path:
    """Integrate each profile as one episode and write a simulator export.

    Start poses and weather are drawn from ``seed`` unless given explicitly.
    """
    profs = [profiles] if isinstance(profiles, MotionProfile) else list(profiles)
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    write_export_meta(out, scene.spec.map_tag, {c.camera_id: c.model for c in cameras}, {c.camera_id: c.offset().matrix() for c in cameras})
    for e, prof in enumerate(profs):
        if starts is not None:
            start = starts[e]
        else:
            start = choose_start(scene, prof, rng)
        if weather is None:
            wth = WEATHER_PRESETS[int(rng.integers(len(WEATHER_PRESETS)))]
        elif isinstance(weather, Weather):
            wth = weather
        else:
            wth = weather[e % len(weather)]
        states = integrate_profile(prof, start)
        check_displacement(states, cameras, prof.frame_interval)
        per_cam = {c.camera_id: camera_poses(states, c, prof.frame_interval) for c in cameras}
        jobs = [(c, per_cam[c.camera_id][k]) for k in range(len(states)) for c in sorted(cameras, key=lambda c: c.camera_id)]

        def _render(job):
            cam, pose = job
            return render_view(scene, pose, cam.model, wth, supersample)

        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                images = list(ex.map(_render, jobs))
        else:
            images = [_render(j) for j in jobs]
        rows = [(cam.camera_id, pose, wth.tag, img) for (cam, pose), img in zip(jobs, images)]
        write_episode(out, f"ep{e:03d}", rows)
    return out
