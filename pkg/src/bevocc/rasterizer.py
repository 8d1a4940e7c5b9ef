"""Ground-truth BEV occupancy from agent annotations.

Vehicles occupy every cell whose center falls inside their oriented footprint.
Pedestrians are single-cell Gaussian blobs merged by max.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import BevGridSpec, grid_to_world, world_to_grid

VEHICLE = "vehicle"
PEDESTRIAN = "pedestrian"
CLASSES = (VEHICLE, PEDESTRIAN)


@dataclass(frozen=True)
class AgentAnnotation:
    cls: str
    x: float
    y: float
    theta: float
    l: float  # noqa: E741
    w: float
    agent_id: int = -1

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"unknown class {self.cls!r}")
        if not (self.l > 0 and self.w > 0):
            raise ValueError("agent dimensions must be positive")

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "class": self.cls,
            "x": self.x,
            "y": self.y,
            "theta": self.theta,
            "l": self.l,
            "w": self.w,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AgentAnnotation":
        return cls(d["class"], d["x"], d["y"], d["theta"], d["l"], d["w"], d.get("agent_id", -1))


@dataclass
class OccupancyMap:
    vehicle: np.ndarray  # (gh, gw) float in [0, 1]
    pedestrian: np.ndarray
    spec: BevGridSpec

    def stack(self) -> np.ndarray:
        return np.stack([self.vehicle, self.pedestrian]).astype(np.float32)

    def binary(self, threshold: float = 0.5) -> np.ndarray:
        return self.stack() >= threshold


def rasterize_vehicle(a: AgentAnnotation, spec: BevGridSpec) -> np.ndarray:
    """Indices ``(n, 2)`` as ``(row, col)`` of cells covered by the vehicle."""
    if not (a.l > 0 and a.w > 0):
        raise ValueError("vehicle dimensions must be positive")
    c, s = math.cos(a.theta), math.sin(a.theta)
    hl, hw = a.l / 2, a.w / 2
    # axis-aligned bound of the rotated rectangle, in grid cells
    ex = abs(c) * hl + abs(s) * hw
    ey = abs(s) * hl + abs(c) * hw
    gx0, gy0 = world_to_grid(a.x - ex, a.y - ey, spec)
    gx1, gy1 = world_to_grid(a.x + ex, a.y + ey, spec)
    j0, j1 = max(math.floor(gx0), 0), min(math.ceil(gx1), spec.gw - 1)
    i0, i1 = max(math.floor(gy0), 0), min(math.ceil(gy1), spec.gh - 1)
    if j0 > j1 or i0 > i1:
        return np.zeros((0, 2), dtype=np.int64)
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    X, Y = grid_to_world(jj, ii, spec)
    dx, dy = X - a.x, Y - a.y
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = (np.abs(u) <= hl) & (np.abs(v) <= hw)
    return np.stack([ii[inside], jj[inside]], axis=1)


def gaussian_patch(a: AgentAnnotation, spec: BevGridSpec, sigma: float = 1.0, radius: float = 4.0):
    """Gaussian blob for a pedestrian, as ``(rows, cols, values)`` in-grid."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    gx, gy = world_to_grid(a.x, a.y, spec)
    r = math.ceil(radius * sigma)
    ci, cj = round(float(gy)), round(float(gx))
    i0, i1 = max(ci - r, 0), min(ci + r, spec.gh - 1)
    j0, j1 = max(cj - r, 0), min(cj + r, spec.gw - 1)
    if i0 > i1 or j0 > j1:
        return slice(0, 0), slice(0, 0), np.zeros((0, 0))
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    val = np.exp(-((ii - gy) ** 2 + (jj - gx) ** 2) / (2 * sigma**2))
    return slice(i0, i1 + 1), slice(j0, j1 + 1), val


def rasterize_pedestrian(a: AgentAnnotation, spec: BevGridSpec, sigma: float = 1.0, out: np.ndarray | None = None):
    """Max-merge the pedestrian's Gaussian into ``out`` (allocated if None)."""
    if out is None:
        out = np.zeros(spec.shape, dtype=np.float64)
    rows, cols, val = gaussian_patch(a, spec, sigma)
    if val.size:
        np.maximum(out[rows, cols], val, out=out[rows, cols])
    return out


def build_ground_truth(annotations, spec: BevGridSpec, sigma: float = 1.0) -> OccupancyMap:
    vehicle = np.zeros(spec.shape, dtype=np.float64)
    pedestrian = np.zeros(spec.shape, dtype=np.float64)
    for a in annotations:
        if a.cls == VEHICLE:
            cells = rasterize_vehicle(a, spec)
            vehicle[cells[:, 0], cells[:, 1]] = 1.0
        else:
            rasterize_pedestrian(a, spec, sigma, out=pedestrian)
    return OccupancyMap(vehicle, pedestrian, spec)


def save_occupancy(occ: OccupancyMap, prefix: str | Path) -> None:
    """Write ``<prefix>_vehicle.png``, ``<prefix>_pedestrian.png`` and ``<prefix>.json``."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    for name in CLASSES:
        arr = np.rint(np.clip(getattr(occ, name), 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr).save(f"{prefix}_{name}.png")
    Path(f"{prefix}.json").write_text(json.dumps({"grid": occ.spec.to_dict()}, indent=2, sort_keys=True))


def load_occupancy(prefix: str | Path) -> OccupancyMap:
    prefix = Path(prefix)
    meta = json.loads(Path(f"{prefix}.json").read_text())
    spec = BevGridSpec.from_dict(meta["grid"])
    chans = [np.asarray(Image.open(f"{prefix}_{name}.png"), dtype=np.float64) / 255.0 for name in CLASSES]
    for ch in chans:
        if ch.shape != spec.shape:
            raise ValueError(f"{prefix}: map shape {ch.shape} != grid {spec.shape}")
    return OccupancyMap(chans[0], chans[1], spec)
