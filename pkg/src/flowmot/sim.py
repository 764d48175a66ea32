"""Synthetic pedestrian scenes: world motion, pinhole camera, detector and distance-sensor noise."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import BBox, Detection, FrameObservations, occlusion_level

PERSON_HEIGHT = 1.7
ASPECT = 0.41  # width / height of a pedestrian box
MIN_DIST_VAR = 1e-6
MIN_DIST = 0.1


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scene"
    n_peds_min: int = 6
    n_peds_max: int = 10
    n_frames: int = 200
    fps: float = 10.0
    # motion
    speed_min: float = 0.8
    speed_max: float = 1.6
    heading_noise: float = 0.05
    waypoint_mode: str = "random"  # "random" | "lateral"
    lane_jitter: float = 1.0
    world_x: float = 10.0
    world_z_min: float = 6.0
    world_z_max: float = 30.0
    spawn_fraction: float = 0.0
    height_jitter: float = 0.1
    # camera
    focal: float = 1000.0
    principal_x: float = 960.0
    principal_y: float = 540.0
    image_w: int = 1920
    image_h: int = 1080
    cam_height: float = 3.0
    cam_pitch: float = 0.1
    pan_rate: float = 0.0
    # detector
    miss_base: float = 0.0
    miss_slope: float = 0.0
    fp_rate: float = 0.0
    box_jitter: float = 0.0
    # distance sensor
    dist_std: float = 0.0
    dist_proportional: bool = False
    dist_ref: float = 10.0
    miscalibration: float = 1.0
    # evaluation filters
    max_distance: float = 70.0
    max_hidden: int = 60
    hidden_occlusion: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.n_peds_min < 1 or self.n_peds_max < self.n_peds_min:
            raise ValueError("need 1 <= n_peds_min <= n_peds_max")
        for name in ("miss_base", "miss_slope", "fp_rate", "spawn_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("heading_noise", "box_jitter", "dist_std", "lane_jitter", "height_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.speed_min < 0 or self.speed_max < self.speed_min:
            raise ValueError("need 0 <= speed_min <= speed_max")
        if self.fps <= 0 or self.focal <= 0 or self.miscalibration <= 0:
            raise ValueError("fps, focal and miscalibration must be > 0")
        if self.waypoint_mode not in ("random", "lateral"):
            raise ValueError(f"unknown waypoint_mode {self.waypoint_mode!r}")

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; world frame is X right, Y up, Z forward."""

    focal: float = 1000.0
    principal_x: float = 960.0
    principal_y: float = 540.0
    position: tuple = (0.0, 0.0, 0.0)
    pitch: float = 0.0  # positive looks down
    yaw: float = 0.0

    def to_camera(self, world_point) -> np.ndarray:
        p = np.asarray(world_point, dtype=float) - np.asarray(self.position, dtype=float)
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        # undo yaw about the vertical axis
        x = cy * p[0] - sy * p[2]
        z = sy * p[0] + cy * p[2]
        y = p[1]
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        forward = (-sp * y + cp * z)
        down = (-cp * y - sp * z)
        return np.array([x, down, forward])


def project(camera: Camera, world_point) -> Optional[tuple[tuple[float, float], float]]:
    """Pinhole projection. Returns ``((u, v), distance)`` or ``None`` behind the camera."""
    xc, yc, zc = camera.to_camera(world_point)
    if zc <= 0:
        return None
    u = camera.principal_x + camera.focal * xc / zc
    v = camera.principal_y + camera.focal * yc / zc
    dist = float(math.sqrt(xc * xc + yc * yc + zc * zc))
    return (float(u), float(v)), dist


@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    positions: np.ndarray  # (n_peds, n_frames, 3), NaN when inactive
    heights: np.ndarray  # (n_peds,)
    descriptor: np.ndarray = field(default=None)

    @property
    def n_peds(self) -> int:
        return self.positions.shape[0]

    def active(self) -> np.ndarray:
        return ~np.isnan(self.positions[..., 0])

    def camera(self, frame: int) -> Camera:
        c = self.config
        return Camera(c.focal, c.principal_x, c.principal_y, (0.0, c.cam_height, 0.0),
                      c.cam_pitch, c.pan_rate * frame / c.fps)

    @classmethod
    def from_trajectories(cls, config: ScenarioConfig, positions, heights=None) -> "Scenario":
        positions = np.asarray(positions, dtype=float)
        if positions.ndim != 3 or positions.shape[1] != config.n_frames or positions.shape[2] != 3:
            raise ValueError("positions must have shape (n_peds, n_frames, 3)")
        if heights is None:
            heights = np.full(positions.shape[0], PERSON_HEIGHT)
        heights = np.asarray(heights, dtype=float)
        desc = scene_descriptor(config, positions)
        return cls(config, positions, heights, desc)


DESCRIPTOR_FIELDS = (
    "density", "mean_speed", "cam_pitch", "cam_height", "pan_rate", "heading_noise",
    "box_jitter", "dist_std", "miss_base", "miss_slope", "fp_rate", "fps",
)


def scene_descriptor(config: ScenarioConfig, positions: np.ndarray) -> np.ndarray:
    """Fixed-length summary of a scenario (stand-in for a global image embedding)."""
    active = ~np.isnan(positions[..., 0])
    density = active.sum(axis=0).mean()
    step = np.diff(positions[..., [0, 2]], axis=1)
    speeds = np.linalg.norm(step, axis=-1) * config.fps
    mean_speed = float(np.nanmean(speeds)) if np.isfinite(speeds).any() else 0.0
    c = config
    return np.array([
        density, mean_speed, c.cam_pitch, c.cam_height, c.pan_rate, c.heading_noise,
        c.box_jitter, c.dist_std, c.miss_base, c.miss_slope, c.fp_rate, c.fps,
    ], dtype=float)


def _next_waypoint(rng, cfg: ScenarioConfig, pos):
    if cfg.waypoint_mode == "lateral":
        side = -1.0 if pos[0] > 0 else 1.0
        x = side * cfg.world_x * rng.uniform(0.7, 1.0)
        z = float(np.clip(pos[1] + rng.normal(0.0, cfg.lane_jitter) if cfg.lane_jitter > 0 else pos[1],
                          cfg.world_z_min, cfg.world_z_max))
        return np.array([x, z])
    return np.array([rng.uniform(-cfg.world_x, cfg.world_x),
                     rng.uniform(cfg.world_z_min, cfg.world_z_max)])


def generate_scenario(config: ScenarioConfig) -> Scenario:
    """Waypoint walkers on the ground plane, deterministic given ``config.seed``."""
    cfg = config
    rng = np.random.default_rng([cfg.seed, 0])
    n = int(rng.integers(cfg.n_peds_min, cfg.n_peds_max + 1))
    T = cfg.n_frames
    positions = np.full((n, T, 3), np.nan)
    heights = PERSON_HEIGHT * (1.0 + rng.uniform(-cfg.height_jitter, cfg.height_jitter, size=n))
    lo = np.array([-cfg.world_x, cfg.world_z_min])
    hi = np.array([cfg.world_x, cfg.world_z_max])
    for i in range(n):
        start = 0
        if cfg.spawn_fraction > 0 and rng.random() < cfg.spawn_fraction and T > 2:
            start = int(rng.integers(1, max(2, T // 2)))
        pos = rng.uniform(lo, hi)
        wp = _next_waypoint(rng, cfg, pos)
        speed = rng.uniform(cfg.speed_min, cfg.speed_max)
        for t in range(start, T):
            positions[i, t] = (pos[0], heights[i] / 2.0, pos[1])
            step = speed / cfg.fps
            to_wp = wp - pos
            remaining = float(np.linalg.norm(to_wp))
            if remaining <= step:
                pos = wp.copy()
                wp = _next_waypoint(rng, cfg, pos)
                speed = rng.uniform(cfg.speed_min, cfg.speed_max)
                continue
            heading = math.atan2(to_wp[1], to_wp[0])
            if cfg.heading_noise > 0:
                heading += rng.normal(0.0, cfg.heading_noise)
            pos = np.clip(pos + step * np.array([math.cos(heading), math.sin(heading)]), lo, hi)
    return Scenario(cfg, positions, heights, scene_descriptor(cfg, positions))


@dataclass(frozen=True)
class GroundTruthRow:
    frame: int
    id: int
    bbox: BBox
    dist: float
    occlusion: float = 0.0


def _project_box(camera: Camera, point, height: float, cfg: ScenarioConfig):
    proj = project(camera, point)
    if proj is None:
        return None
    (u, v), dist = proj
    if not (0.0 <= u < cfg.image_w and 0.0 <= v < cfg.image_h):
        return None
    h_px = camera.focal * height / dist
    return BBox(u, v, ASPECT * h_px, h_px), dist


def ground_truth(scenario: Scenario) -> list[list[GroundTruthRow]]:
    """Per-frame ground-truth boxes of every in-image pedestrian, with occlusion levels."""
    cfg = scenario.config
    frames = []
    for t in range(cfg.n_frames):
        cam = scenario.camera(t)
        vis = []
        for i in range(scenario.n_peds):
            p = scenario.positions[i, t]
            if np.isnan(p[0]):
                continue
            res = _project_box(cam, p, scenario.heights[i], cfg)
            if res is not None:
                vis.append((i, res[0], res[1]))
        rows = []
        for i, box, dist in vis:
            occluders = [b for j, b, d in vis if j != i and d < dist]
            rows.append(GroundTruthRow(t, i, box, dist, occlusion_level(box, occluders)))
        frames.append(rows)
    return frames


def sensor_variance(cfg: ScenarioConfig, gt_dist: float) -> float:
    """True variance of the distance reading at ``gt_dist``."""
    factor = (gt_dist / cfg.dist_ref) ** 2 if cfg.dist_proportional else 1.0
    return cfg.dist_std ** 2 * factor


def render_detections(scenario: Scenario, gt_distances: bool = False):
    """Simulate the detector and distance sensor.

    Returns ``(frames, gt)`` where ``frames`` is a list of FrameObservations and
    ``gt`` the per-frame ground-truth rows. With ``gt_distances`` the sensor is
    bypassed and every true detection carries its exact distance.
    """
    cfg = scenario.config
    rng = np.random.default_rng([cfg.seed, 1])
    gt = ground_truth(scenario)
    sizes = np.array([(r.bbox.w, r.bbox.h) for rows in gt for r in rows]).reshape(-1, 2)
    frames = []
    for t, rows in enumerate(gt):
        dets = []
        for r in rows:
            p_miss = min(1.0, max(0.0, cfg.miss_base + cfg.miss_slope * r.occlusion))
            if rng.random() < p_miss:
                continue
            b = r.bbox
            if cfg.box_jitter > 0:
                j = rng.normal(0.0, cfg.box_jitter, size=4)
                b = BBox(b.cx + j[0], b.cy + j[1], max(1.0, b.w + j[2]), max(1.0, b.h + j[3]))
            var = sensor_variance(cfg, r.dist)
            # always consume the noise draw so both sensor modes share every other draw
            noise = rng.normal(0.0, math.sqrt(var)) if var > 0 else 0.0
            if gt_distances:
                d, reported = r.dist, MIN_DIST_VAR
            else:
                d = r.dist + noise
                reported = max(var * cfg.miscalibration, MIN_DIST_VAR)
            conf = float(np.clip(0.95 - 0.5 * r.occlusion + rng.normal(0.0, 0.03), 0.05, 1.0))
            dets.append(Detection(b, max(d, MIN_DIST), reported, conf, t, r.id))
        n_fp = int(rng.poisson(cfg.fp_rate)) if cfg.fp_rate > 0 and len(sizes) else 0
        for _ in range(n_fp):
            w, h = sizes[rng.integers(len(sizes))]
            cx = rng.uniform(w / 2, cfg.image_w - w / 2)
            cy = rng.uniform(h / 2, cfg.image_h - h / 2)
            d_nominal = cfg.focal * PERSON_HEIGHT / h * rng.uniform(0.9, 1.1)
            var = sensor_variance(cfg, d_nominal)
            d = d_nominal + (rng.normal(0.0, math.sqrt(var)) if var > 0 else 0.0)
            reported = max(var * cfg.miscalibration, MIN_DIST_VAR)
            dets.append(Detection(BBox(cx, cy, w, h), max(d, MIN_DIST), reported,
                                  float(rng.uniform(0.1, 0.6)), t, None))
        frames.append(FrameObservations(t, tuple(dets), cfg.name))
    return frames, gt


def apply_eval_filters(gt: list[list[GroundTruthRow]], max_distance: float = 70.0,
                       max_hidden: int = 60, hidden_occlusion: float = 0.9):
    """Drop far targets and targets hidden for longer than ``max_hidden`` frames.

    A target that becomes visible again is re-activated under the same identity.
    """
    hidden_run: dict[int, int] = {}
    out = []
    for rows in gt:
        kept = []
        seen = set()
        for r in rows:
            seen.add(r.id)
            run = hidden_run.get(r.id, 0) + 1 if r.occlusion >= hidden_occlusion else 0
            hidden_run[r.id] = run
            if r.dist > max_distance or run > max_hidden:
                continue
            kept.append(r)
        # leaving the image also counts as hidden
        for pid in list(hidden_run):
            if pid not in seen:
                hidden_run[pid] += 1
        out.append(kept)
    return out


# -- presets ------------------------------------------------------------------

def preset(name: str, seed: int = 0) -> ScenarioConfig:
    """Named scenario families. ``easy``/``moderate``/``hard`` are difficulty presets;
    ``stroll``/``rush``/``erratic``/``panning`` are archetypes with distinct motion and noise."""
    base = ScenarioConfig(name=f"{name}-{seed:04d}", seed=seed)
    if name == "easy":
        return base.replace(n_peds_min=3, n_peds_max=6, box_jitter=1.0, dist_std=0.3,
                            miss_base=0.02, miss_slope=0.2, fp_rate=0.1)
    if name == "moderate":
        return base.replace(n_peds_min=6, n_peds_max=10, box_jitter=1.5, dist_std=0.5,
                            miss_base=0.05, miss_slope=0.5, fp_rate=0.3, heading_noise=0.1)
    if name == "hard":
        return base.replace(n_peds_min=10, n_peds_max=14, waypoint_mode="lateral",
                            lane_jitter=0.5, world_z_min=6.0, world_z_max=22.0,
                            speed_min=1.0, speed_max=1.8, box_jitter=2.0, dist_std=0.5,
                            miss_base=0.05, miss_slope=0.9, fp_rate=0.3, heading_noise=0.05)
    if name == "stroll":
        return base.replace(n_peds_min=6, n_peds_max=9, speed_min=0.4, speed_max=0.9,
                            heading_noise=0.02, box_jitter=0.5, dist_std=0.2)
    if name == "rush":
        return base.replace(n_peds_min=6, n_peds_max=9, speed_min=1.8, speed_max=2.6,
                            heading_noise=0.02, waypoint_mode="lateral", box_jitter=3.0,
                            dist_std=0.6)
    if name == "erratic":
        return base.replace(n_peds_min=6, n_peds_max=9, speed_min=0.8, speed_max=1.4,
                            heading_noise=0.6, box_jitter=1.5, dist_std=1.2,
                            dist_proportional=True)
    if name == "panning":
        return base.replace(n_peds_min=6, n_peds_max=9, pan_rate=0.08, cam_height=6.0,
                            cam_pitch=0.25, box_jitter=1.0, dist_std=0.4)
    raise KeyError(f"unknown preset {name!r}")


PRESETS = ("easy", "moderate", "hard", "stroll", "rush", "erratic", "panning")
ARCHETYPES = ("stroll", "rush", "erratic", "panning")
