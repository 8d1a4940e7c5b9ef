"""Camera models, world/grid transforms, ground-plane homography and BEV sampling.

Conventions
-----------
* World frame: z up, the ground is the plane z = 0. Lengths in meters.
* Camera frame: x right, y down, z forward (OpenCV). ``R`` and ``t`` map world
  points into the camera frame: ``p_cam = R @ p_world + t``.
* Image coordinates are continuous with the origin at the top-left corner of
  the top-left pixel, so the center of pixel ``(u, v)`` is ``(u + 0.5, v + 0.5)``.
* Grid coordinates ``(g_x, g_y)`` are continuous; integer values are cell
  centers. Grids are stored row-major as ``[g_y, g_x]`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch


class DegeneratePoseError(ValueError):
    """Raised when a camera pose makes the ground homography singular."""


def _as_matrix(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CameraCalibration:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image_size: tuple[int, int]  # (width, height) in pixels

    def __post_init__(self):
        K = _as_matrix(self.K, (3, 3))
        R = _as_matrix(self.R, (3, 3))
        t = _as_matrix(self.t, (3,))
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError("K must be upper triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("R is not orthonormal")
        w, h = (int(v) for v in self.image_size)
        if w < 1 or h < 1:
            raise ValueError(f"invalid image size {self.image_size}")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "image_size", (w, h))

    @classmethod
    def from_pose(
        cls,
        position: Sequence[float],
        yaw: float,
        pitch: float,
        image_size: tuple[int, int],
        fov_deg: float = 90.0,
    ) -> "CameraCalibration":
        """Camera at ``position`` looking along ``yaw`` (rad, from +x toward +y),
        tilted by ``pitch`` (rad, negative looks down)."""
        forward = np.array(
            [math.cos(pitch) * math.cos(yaw), math.cos(pitch) * math.sin(yaw), math.sin(pitch)]
        )
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        C = np.asarray(position, dtype=np.float64)
        return cls(intrinsics_from_fov(*image_size, fov_deg), R, -R @ C, image_size)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def projection_matrix(self) -> np.ndarray:
        return self.K @ np.column_stack([self.R, self.t])

    def to_dict(self) -> dict:
        return {
            "K": [float(v) for v in self.K.ravel()],
            "R": [float(v) for v in self.R.ravel()],
            "t": [float(v) for v in self.t],
            "width": self.image_size[0],
            "height": self.image_size[1],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraCalibration":
        return cls(d["K"], d["R"], d["t"], (d["width"], d["height"]))


def intrinsics_from_fov(width: int, height: int, fov_deg: float = 90.0) -> np.ndarray:
    """Square-pixel intrinsics with the principal point at the image center."""
    f = width / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
    return np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])


def project_world_point(calib: CameraCalibration, points) -> tuple[np.ndarray, np.ndarray]:
    """Project world points ``(..., 3)`` to pixels.

    Returns ``(uv, depth)``; ``uv`` is meaningless where ``depth <= 0``.
    """
    p = np.asarray(points, dtype=np.float64)
    cam = p @ calib.R.T + calib.t
    depth = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = cam @ calib.K.T
        uv = pix[..., :2] / pix[..., 2:3]
    return uv, depth


@dataclass(frozen=True)
class BevGridSpec:
    x0: float
    y0: float
    dx: float
    dy: float
    gh: int
    gw: int

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("grid resolution must be positive")
        if self.gh < 1 or self.gw < 1:
            raise ValueError("grid must have at least one cell")
        if not all(math.isfinite(v) for v in (self.x0, self.y0, self.dx, self.dy)):
            raise ValueError("grid parameters must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.gh, self.gw)

    @property
    def extent(self) -> tuple[float, float]:
        """Physical size ``(width_m, height_m)`` of the grid."""
        return (self.gw * self.dx, self.gh * self.dy)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World ``(X, Y)`` of every cell center, each shaped ``(gh, gw)``."""
        gy, gx = np.meshgrid(np.arange(self.gh), np.arange(self.gw), indexing="ij")
        return grid_to_world(gx, gy, self)

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "dx": self.dx, "dy": self.dy, "gh": self.gh, "gw": self.gw}

    @classmethod
    def from_dict(cls, d: dict) -> "BevGridSpec":
        return cls(float(d["x0"]), float(d["y0"]), float(d["dx"]), float(d["dy"]), int(d["gh"]), int(d["gw"]))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite coordinate")


def world_to_grid(x, y, spec: BevGridSpec):
    """Metric position to fractional grid coordinates. No clamping."""
    _check_finite(x, y)
    return (np.subtract(x, spec.x0) / spec.dx, np.subtract(y, spec.y0) / spec.dy)


def dims_to_grid(length, width, spec: BevGridSpec):
    _check_finite(length, width)
    return (np.divide(length, spec.dx), np.divide(width, spec.dy))


def grid_to_world(gx, gy, spec: BevGridSpec):
    _check_finite(gx, gy)
    return (spec.x0 + np.multiply(gx, spec.dx), spec.y0 + np.multiply(gy, spec.dy))


def ground_homography(calib: CameraCalibration) -> np.ndarray:
    """3x3 map from ground points ``(x, y, 1)`` to homogeneous pixels."""
    H = calib.K @ np.column_stack([calib.R[:, 0], calib.R[:, 1], calib.t])
    if abs(np.linalg.det(H)) < 1e-12:
        raise DegeneratePoseError("camera lies in the ground plane; homography is singular")
    return H


def apply_homography(H: np.ndarray, xy) -> tuple[np.ndarray, np.ndarray]:
    """Map ground points ``(..., 2)``; returns ``(uv, w)`` where ``w > 0`` means
    the point is in front of the camera."""
    xy = np.asarray(xy, dtype=np.float64)
    hom = xy @ H[:, :2].T + H[:, 2]
    w = hom[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = hom[..., :2] / w[..., None]
    return uv, w


def coverage_mask(calib: CameraCalibration, spec: BevGridSpec, max_range: float = 100.0) -> np.ndarray:
    """Boolean ``(gh, gw)`` grid of cells whose centers this camera sees."""
    X, Y = spec.cell_centers()
    uv, w = apply_homography(ground_homography(calib), np.stack([X, Y], axis=-1))
    return _visible(calib, X, Y, uv, w, max_range)


def _visible(calib, X, Y, uv, w, max_range):
    W, H = calib.image_size
    c = calib.center
    with np.errstate(invalid="ignore"):
        inside = (w > 0) & (uv[..., 0] >= 0) & (uv[..., 0] < W) & (uv[..., 1] >= 0) & (uv[..., 1] < H)
    in_range = np.hypot(X - c[0], Y - c[1]) <= max_range
    return inside & in_range


@dataclass
class CoverageMask:
    per_camera: np.ndarray  # (N, gh, gw) bool

    @property
    def combined(self) -> np.ndarray:
        return np.any(self.per_camera, axis=0)


def feature_map_size(image_size: tuple[int, int], stride: int) -> tuple[int, int]:
    """Feature map ``(h, w)`` produced from an image of ``(W, H)`` at ``stride``."""
    W, H = image_size
    return (math.ceil(H / stride), math.ceil(W / stride))


@dataclass
class ProjectionTable:
    """Precomputed bilinear taps that warp one view's feature map onto the grid.

    ``index`` holds flat feature-map indices of the four taps (top-left,
    top-right, bottom-left, bottom-right) per cell; ``wx``/``wy`` are the
    fractional offsets; ``mask`` is the coverage of the cell.
    """

    index: np.ndarray  # (4, gh*gw) int64
    wx: np.ndarray  # (gh*gw,)
    wy: np.ndarray
    mask: np.ndarray  # (gh, gw) bool
    feature_hw: tuple[int, int]


def projection_table(
    calib: CameraCalibration,
    spec: BevGridSpec,
    feature_stride: int = 4,
    max_range: float = 100.0,
) -> ProjectionTable:
    X, Y = spec.cell_centers()
    uv, w = apply_homography(ground_homography(calib), np.stack([X, Y], axis=-1))
    mask = _visible(calib, X, Y, uv, w, max_range)
    h, wf = feature_map_size(calib.image_size, feature_stride)
    # feature cell f covers image pixels [f*s, (f+1)*s); its center is (f + 0.5) * s
    fu = np.where(mask, uv[..., 0], 0.0) / feature_stride - 0.5
    fv = np.where(mask, uv[..., 1], 0.0) / feature_stride - 0.5
    c0 = np.floor(fu)
    r0 = np.floor(fv)
    wx = (fu - c0).ravel()
    wy = (fv - r0).ravel()
    c0 = c0.astype(np.int64).ravel()
    r0 = r0.astype(np.int64).ravel()
    c1 = np.clip(c0 + 1, 0, wf - 1)
    r1 = np.clip(r0 + 1, 0, h - 1)
    c0 = np.clip(c0, 0, wf - 1)
    r0 = np.clip(r0, 0, h - 1)
    index = np.stack([r0 * wf + c0, r0 * wf + c1, r1 * wf + c0, r1 * wf + c1])
    return ProjectionTable(index, wx, wy, mask, (h, wf))


def apply_projection(features: torch.Tensor, index, wx, wy, mask) -> torch.Tensor:
    """Warp ``(..., C, h, w)`` features with stacked projection tables.

    ``index`` is ``(..., 4, Q)``, ``wx``/``wy`` are ``(..., Q)`` and ``mask`` is
    ``(..., gh, gw)``; leading dims must match those of ``features``. Uses the
    lerp form so a constant field is reproduced exactly.
    """
    *lead, C, h, w = features.shape
    gh, gw = mask.shape[-2:]
    flat = features.reshape(*lead, C, h * w)
    taps = []
    for k in range(4):
        idx = index[..., k, :].unsqueeze(-2).expand(*lead, C, index.shape[-1])
        taps.append(torch.gather(flat, -1, idx))
    wx = wx.unsqueeze(-2).to(features.dtype)
    wy = wy.unsqueeze(-2).to(features.dtype)
    top = taps[0] + wx * (taps[1] - taps[0])
    bottom = taps[2] + wx * (taps[3] - taps[2])
    out = top + wy * (bottom - top)
    out = out.reshape(*lead, C, gh, gw)
    return torch.where(mask.unsqueeze(-3), out, torch.zeros((), dtype=out.dtype))


def table_tensors(table: ProjectionTable) -> tuple[torch.Tensor, ...]:
    return (
        torch.from_numpy(table.index),
        torch.from_numpy(table.wx),
        torch.from_numpy(table.wy),
        torch.from_numpy(table.mask),
    )


def sample_features_to_bev(
    features: torch.Tensor,
    calib: CameraCalibration,
    spec: BevGridSpec,
    feature_stride: int = 4,
    max_range: float = 100.0,
) -> tuple[torch.Tensor, np.ndarray]:
    """Inverse-warp one view's ``(C, h, w)`` feature map onto the BEV grid.

    Returns the ``(C, gh, gw)`` BEV features and the view's coverage mask.
    Uncovered cells are zero.
    """
    expected = feature_map_size(calib.image_size, feature_stride)
    if tuple(features.shape[-2:]) != expected:
        raise ValueError(
            f"feature map {tuple(features.shape[-2:])} does not match image "
            f"{calib.image_size} at stride {feature_stride} (expected {expected})"
        )
    table = projection_table(calib, spec, feature_stride, max_range)
    return apply_projection(features, *table_tensors(table)), table.mask


def ground_footprint(calib: CameraCalibration, max_range: float = 100.0, n_arc: int = 256) -> np.ndarray:
    """Convex polygon ``(M, 2)`` of ground points visible to the camera.

    Visibility conditions are linear in homogeneous ground coordinates, so the
    footprint is a range disk clipped by five half-planes.
    """
    H = ground_homography(calib)
    W, Hh = calib.image_size
    c = calib.center
    ang = np.linspace(0.0, 2 * math.pi, n_arc, endpoint=False)
    poly = np.stack([c[0] + max_range * np.cos(ang), c[1] + max_range * np.sin(ang)], axis=1)
    # rows a with a . (x, y, 1) >= 0; depth gets a small margin to stay off the horizon
    planes = [H[2] - np.array([0.0, 0.0, 1e-6]), H[0], W * H[2] - H[0], H[1], Hh * H[2] - H[1]]
    for a in planes:
        poly = _clip_halfplane(poly, a)
        if len(poly) == 0:
            break
    return poly


def _clip_halfplane(poly: np.ndarray, a: np.ndarray) -> np.ndarray:
    if len(poly) == 0:
        return poly
    s = poly @ a[:2] + a[2]
    out = []
    n = len(poly)
    for i in range(n):
        j = (i + 1) % n
        if s[i] >= 0:
            out.append(poly[i])
        if (s[i] >= 0) != (s[j] >= 0):
            f = s[i] / (s[i] - s[j])
            out.append(poly[i] + f * (poly[j] - poly[i]))
    return np.array(out).reshape(-1, 2)


def fit_grid_to_coverage(
    calibs: Sequence[CameraCalibration],
    resolution: float | tuple[float, float],
    size: int | tuple[int, int],
    max_range: float = 100.0,
) -> BevGridSpec:
    """Center a fixed-size, fixed-resolution grid on the cameras' coverage union."""
    from shapely.geometry import Polygon
    from shapely.ops import unary_union

    if len(calibs) == 0:
        raise ValueError("need at least one calibration")
    dx, dy = (resolution, resolution) if np.isscalar(resolution) else resolution
    gh, gw = (size, size) if np.isscalar(size) else size
    polys = []
    for calib in calibs:
        fp = ground_footprint(calib, max_range)
        if len(fp) >= 3:
            polys.append(Polygon(fp))
    union = unary_union(polys) if polys else None
    if union is None or union.is_empty or union.area <= 0:
        raise ValueError("cameras cover no ground area")
    cx, cy = union.centroid.x, union.centroid.y
    return BevGridSpec(
        float(cx - (gw - 1) / 2 * dx), float(cy - (gh - 1) / 2 * dy), float(dx), float(dy), int(gh), int(gw)
    )
