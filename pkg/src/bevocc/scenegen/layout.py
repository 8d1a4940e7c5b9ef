"""Road layouts and the procedural ground texture."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LAYOUTS = ("three_way", "four_way", "segment")

_ARM_ANGLES = {
    "four_way": (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi),
    "three_way": (0.0, 0.5 * math.pi, math.pi),
    "segment": (0.0, math.pi),
}


class ValueNoise:
    """Smooth lattice noise in [0, 1) with a periodic random table."""

    def __init__(self, rng: np.random.Generator, size: int = 64):
        self.table = rng.random((size, size))
        self.size = size

    def __call__(self, x: np.ndarray, y: np.ndarray, scale: float) -> np.ndarray:
        gx, gy = x / scale, y / scale
        ix, iy = np.floor(gx), np.floor(gy)
        fx, fy = gx - ix, gy - iy
        fx = fx * fx * (3 - 2 * fx)
        fy = fy * fy * (3 - 2 * fy)
        n = self.size
        ix = ix.astype(np.int64) % n
        iy = iy.astype(np.int64) % n
        ix1, iy1 = (ix + 1) % n, (iy + 1) % n
        t = self.table
        top = t[iy, ix] + fx * (t[iy, ix1] - t[iy, ix])
        bot = t[iy1, ix] + fx * (t[iy1, ix1] - t[iy1, ix])
        return top + fy * (bot - top)


@dataclass
class RoadLayout:
    kind: str
    center: tuple[float, float]
    rotation: float
    road_width: float
    sidewalk_width: float
    road_albedo: float
    grass_color: tuple[float, float, float]
    sidewalk_color: tuple[float, float, float]
    marking_color: tuple[float, float, float]
    noise: ValueNoise = field(repr=False)

    @property
    def arm_angles(self) -> list[float]:
        return [self.rotation + a for a in _ARM_ANGLES[self.kind]]

    @property
    def arm_dirs(self) -> list[np.ndarray]:
        return [np.array([math.cos(a), math.sin(a)]) for a in self.arm_angles]

    def lane_offset(self) -> float:
        return self.road_width / 4

    def classify(self, X: np.ndarray, Y: np.ndarray):
        """Boolean road, sidewalk and lane-marking masks for ground points."""
        half = self.road_width / 2
        px, py = X - self.center[0], Y - self.center[1]
        road = np.zeros(X.shape, dtype=bool)
        side = np.zeros(X.shape, dtype=bool)
        mark = np.zeros(X.shape, dtype=bool)
        for d in self.arm_dirs:
            s = px * d[0] + py * d[1]
            perp = np.abs(-px * d[1] + py * d[0])
            along = s >= -half
            road |= along & (perp <= half)
            side |= (s >= -half - self.sidewalk_width) & (perp > half) & (perp <= half + self.sidewalk_width)
            dashed = np.mod(s, 6.0) < 3.0
            mark |= (s > half + 1.0) & (perp < 0.12) & dashed
        side &= ~road
        return road, side, mark

    def ground_color(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        road, side, mark = self.classify(X, Y)
        coarse = self.noise(X, Y, 3.7)
        fine = self.noise(X + 113.0, Y - 71.0, 0.45)
        tex = 0.85 + 0.2 * coarse + 0.1 * fine
        rgb = np.empty(X.shape + (3,))
        rgb[...] = np.asarray(self.grass_color) * (0.8 + 0.4 * coarse[..., None]) * (0.9 + 0.2 * fine[..., None])
        rgb[side] = np.asarray(self.sidewalk_color) * tex[side][:, None]
        rgb[road] = self.road_albedo * tex[road][:, None] * np.array([1.0, 1.0, 1.03])
        rgb[mark] = np.asarray(self.marking_color)
        return np.clip(rgb, 0.0, 1.0)


def make_layout(kind: str, rng: np.random.Generator, road_width_range, road_albedo_range) -> RoadLayout:
    if kind not in LAYOUTS:
        raise ValueError(f"unknown layout {kind!r}")
    grass = np.array([0.28, 0.42, 0.2]) + rng.uniform(-0.06, 0.06, 3)
    concrete = 0.55 + rng.uniform(0.0, 0.12)
    marking = (0.92, 0.92, 0.9) if rng.random() < 0.6 else (0.9, 0.78, 0.25)
    return RoadLayout(
        kind=kind,
        center=(0.0, 0.0),
        rotation=float(rng.uniform(0, 0.5 * math.pi)),
        road_width=float(rng.uniform(*road_width_range)),
        sidewalk_width=float(rng.uniform(2.0, 3.0)),
        road_albedo=float(rng.uniform(*road_albedo_range)),
        grass_color=tuple(float(v) for v in grass),
        sidewalk_color=(concrete, concrete * 0.98, concrete * 0.95),
        marking_color=marking,
        noise=ValueNoise(rng),
    )
