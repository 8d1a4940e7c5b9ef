"""Procedural multi-camera traffic scenes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from ..geometry import CameraCalibration
from ..rasterizer import PEDESTRIAN, VEHICLE, AgentAnnotation
from .layout import LAYOUTS, RoadLayout, make_layout
from .render import Box, render_agents, render_static, tight_boxes, to_uint8

_VEHICLE_COLORS = [
    (0.75, 0.1, 0.1),
    (0.1, 0.2, 0.65),
    (0.92, 0.92, 0.92),
    (0.08, 0.08, 0.09),
    (0.45, 0.46, 0.48),
    (0.2, 0.5, 0.25),
    (0.85, 0.7, 0.15),
    (0.55, 0.3, 0.15),
]


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    layout: str = "four_way"
    num_cameras: int = 4
    camera_height_range: tuple[float, float] = (5.0, 8.0)
    camera_max_range: float = 100.0
    rng_seed: int = 0
    num_frames: int = 500
    vehicle_count_range: tuple[int, int] = (8, 14)
    pedestrian_count_range: tuple[int, int] = (6, 12)
    image_size: tuple[int, int] = (320, 180)
    fov_deg: float = 90.0
    frame_interval: float = 0.5
    arm_length: float = 40.0
    camera_ring_radius: float = 25.0
    camera_pitch_range_deg: tuple[float, float] = (-25.0, -10.0)
    road_width_range: tuple[float, float] = (7.0, 9.0)
    road_albedo_range: tuple[float, float] = (0.18, 0.32)
    num_structures: int = 3

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.num_cameras < 1:
            raise ValueError("num_cameras must be >= 1")
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        lo, hi = self.camera_height_range
        if not (0 < lo <= hi):
            raise ValueError("camera heights must be positive")
        for name in ("vehicle_count_range", "pedestrian_count_range"):
            a, b = getattr(self, name)
            if not (0 <= a <= b):
                raise ValueError(f"invalid {name}")
        if self.camera_max_range <= 0:
            raise ValueError("camera_max_range must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class AgentTrack:
    """Agent moving at constant speed along a looped polyline."""

    agent_id: int
    cls: str
    path: np.ndarray  # (M, 2) polyline vertices
    period: float  # loop length in meters (>= path length; the excess is off-scene)
    speed: float
    offset: float
    l: float  # noqa: E741
    w: float
    h: float
    color: tuple[float, float, float]

    @cached_property
    def _cum(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.path, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    def pose(self, t: float) -> tuple[float, float, float]:
        s = (self.offset + self.speed * t) % self.period
        cum = self._cum
        k = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(self.path) - 2))
        a, b = self.path[k], self.path[k + 1]
        d = (b - a) / (cum[k + 1] - cum[k])
        p = a + d * (s - cum[k])  # past the last vertex we keep going straight
        return float(p[0]), float(p[1]), math.atan2(d[1], d[0])


@dataclass
class Scene:
    spec: SceneSpec
    cameras: list[CameraCalibration]
    tracks: list[AgentTrack]
    layout: RoadLayout
    structures: list[Box] = field(default_factory=list)

    def time(self, frame_id: int) -> float:
        return frame_id * self.spec.frame_interval

    def annotations(self, frame_id: int) -> list[AgentAnnotation]:
        out = []
        for tr in self.tracks:
            x, y, th = tr.pose(self.time(frame_id))
            out.append(AgentAnnotation(tr.cls, x, y, th, tr.l, tr.w, tr.agent_id))
        return out

    def agent_boxes(self, frame_id: int) -> list[Box]:
        boxes = []
        for tr in self.tracks:
            x, y, th = tr.pose(self.time(frame_id))
            boxes.append(Box(x, y, th, tr.l, tr.w, tr.h, tr.color, tr.agent_id))
        return boxes

    @cached_property
    def _static(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [render_static(cam, self.layout.ground_color, self.structures) for cam in self.cameras]

    def backgrounds(self) -> list[np.ndarray]:
        """Agent-free uint8 renders, one per camera."""
        return [to_uint8(rgb) for rgb, _ in self._static]


@dataclass
class RenderedFrame:
    frame_id: int
    images: list[np.ndarray]  # per camera (H, W, 3) uint8
    backgrounds: list[np.ndarray]
    annotations: list[AgentAnnotation]
    boxes2d: list[dict[int, list[float]]]  # per camera: agent_id -> [x0, y0, x1, y1]


def _right(v: np.ndarray) -> np.ndarray:
    return np.array([v[1], -v[0]])


def _line_intersection(p, d, q, e) -> np.ndarray:
    # p + a d = q + b e
    A = np.column_stack([d, -e])
    a, _ = np.linalg.solve(A, q - p)
    return p + a * d


def vehicle_path(layout: RoadLayout, a: int, b: int, arm_length: float) -> np.ndarray:
    """Right-hand-traffic lane polyline entering on arm ``a`` and leaving on ``b``."""
    c = np.asarray(layout.center)
    da, db = layout.arm_dirs[a], layout.arm_dirs[b]
    o = layout.lane_offset()
    start = c + arm_length * da + o * _right(-da)
    end = c + arm_length * db + o * _right(db)
    if np.dot(da, db) < -0.999:
        return np.stack([start, end])
    corner = _line_intersection(start, -da, end, db)
    return np.stack([start, corner, end])


def pedestrian_path(layout: RoadLayout, arm: int, side: int, arm_length: float, outward: bool) -> np.ndarray:
    c = np.asarray(layout.center)
    d = layout.arm_dirs[arm]
    off = side * (layout.road_width / 2 + layout.sidewalk_width / 2)
    p0 = c + (layout.road_width / 2 + layout.sidewalk_width) * d + off * _right(d)
    p1 = c + arm_length * d + off * _right(d)
    return np.stack([p0, p1]) if outward else np.stack([p1, p0])


def _path_length(path: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(path, axis=0), axis=1).sum())


def _place_cameras(spec: SceneSpec, layout: RoadLayout, rng) -> list[CameraCalibration]:
    cams = []
    c = np.asarray(layout.center)
    for k in range(spec.num_cameras):
        ang = layout.rotation + math.pi / 4 + 2 * math.pi * k / spec.num_cameras + rng.uniform(-0.25, 0.25)
        radius = spec.camera_ring_radius * rng.uniform(0.85, 1.15)
        pos_xy = c + radius * np.array([math.cos(ang), math.sin(ang)])
        height = rng.uniform(*spec.camera_height_range)
        to_center = c - pos_xy
        yaw = math.atan2(to_center[1], to_center[0]) + rng.uniform(-0.17, 0.17)
        pitch = math.radians(rng.uniform(*spec.camera_pitch_range_deg))
        cams.append(
            CameraCalibration.from_pose(
                (pos_xy[0], pos_xy[1], height), yaw, pitch, spec.image_size, spec.fov_deg
            )
        )
    return cams


def _place_structures(spec: SceneSpec, layout: RoadLayout, cams, rng) -> list[Box]:
    boxes: list[Box] = []
    tries = 0
    half_clear = layout.road_width / 2 + layout.sidewalk_width + 1.0
    while len(boxes) < spec.num_structures and tries < 200:
        tries += 1
        ang = rng.uniform(0, 2 * math.pi)
        dist = rng.uniform(1.15, 1.8) * spec.camera_ring_radius
        x, y = dist * math.cos(ang), dist * math.sin(ang)
        l, w, h = rng.uniform(5, 12), rng.uniform(4, 9), rng.uniform(3, 10)
        reach = math.hypot(l, w) / 2
        clear = True
        for d in layout.arm_dirs:
            s = x * d[0] + y * d[1]
            perp = abs(-x * d[1] + y * d[0])
            if s > -half_clear and perp < half_clear + reach:
                clear = False
        for cam in cams:
            if math.hypot(cam.center[0] - x, cam.center[1] - y) < reach + 3:
                clear = False
        if clear:
            shade = rng.uniform(0.45, 0.8)
            tint = rng.uniform(-0.08, 0.08, 3)
            boxes.append(Box(x, y, rng.uniform(0, math.pi), l, w, h, tuple(float(v) for v in shade + tint), -2))
    return boxes


def generate_scene(spec: SceneSpec) -> Scene:
    """Cameras, road layout, static structures and agent tracks for ``spec``."""
    rng = np.random.default_rng(spec.rng_seed)
    layout = make_layout(spec.layout, rng, spec.road_width_range, spec.road_albedo_range)
    cams = _place_cameras(spec, layout, rng)
    structures = _place_structures(spec, layout, cams, rng)

    n_arms = len(layout.arm_dirs)
    period = 2 * spec.arm_length + 30.0
    arm_speed = rng.uniform(6.0, 11.0, n_arms)
    arm_offsets: list[list[float]] = [[] for _ in range(n_arms)]
    tracks: list[AgentTrack] = []
    n_veh = int(rng.integers(spec.vehicle_count_range[0], spec.vehicle_count_range[1] + 1))
    for _ in range(n_veh):
        a = int(rng.integers(n_arms))
        b = int(rng.choice([k for k in range(n_arms) if k != a]))
        if rng.random() < 0.15:
            l, w, h = rng.uniform(7.0, 11.0), rng.uniform(2.3, 2.6), rng.uniform(2.8, 3.4)
        else:
            l, w, h = rng.uniform(3.8, 5.2), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.9)
        # keep vehicles sharing an entry lane apart; they move in lockstep there
        for _ in range(50):
            off = rng.uniform(0, period)
            gaps = [min(abs(off - o), period - abs(off - o)) for o in arm_offsets[a]]
            if all(g > 13.0 for g in gaps):
                break
        arm_offsets[a].append(off)
        color = _VEHICLE_COLORS[int(rng.integers(len(_VEHICLE_COLORS)))]
        color = tuple(float(np.clip(v + rng.uniform(-0.05, 0.05), 0, 1)) for v in color)
        tracks.append(
            AgentTrack(len(tracks), VEHICLE, vehicle_path(layout, a, b, spec.arm_length), period,
                       float(arm_speed[a]), off, l, w, h, color)
        )
    n_ped = int(rng.integers(spec.pedestrian_count_range[0], spec.pedestrian_count_range[1] + 1))
    for _ in range(n_ped):
        arm = int(rng.integers(n_arms))
        side = int(rng.choice([-1, 1]))
        path = pedestrian_path(layout, arm, side, spec.arm_length, bool(rng.random() < 0.5))
        length = _path_length(path)
        tracks.append(
            AgentTrack(len(tracks), PEDESTRIAN, path, length, float(rng.uniform(0.9, 1.6)),
                       float(rng.uniform(0, length)), float(rng.uniform(0.25, 0.3)),
                       float(rng.uniform(0.25, 0.3)), float(rng.uniform(1.6, 1.85)),
                       tuple(float(v) for v in rng.uniform(0.1, 0.9, 3)))
        )
    return Scene(spec, cams, tracks, layout, structures)


def render_frame(scene: Scene, frame_id: int) -> RenderedFrame:
    if not 0 <= frame_id < scene.spec.num_frames:
        raise ValueError(f"frame {frame_id} outside [0, {scene.spec.num_frames})")
    boxes = scene.agent_boxes(frame_id)
    images, boxes2d = [], []
    for cam, (rgb, depth) in zip(scene.cameras, scene._static):
        img, ids = render_agents(cam, to_uint8(rgb), depth, boxes)
        images.append(img)
        boxes2d.append(tight_boxes(ids))
    return RenderedFrame(frame_id, images, scene.backgrounds(), scene.annotations(frame_id), boxes2d)
