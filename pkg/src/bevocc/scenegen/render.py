"""Minimal ray-casting renderer: textured ground, sky, flat-shaded boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import CameraCalibration, project_world_point

_LIGHT = np.array([0.35, 0.5, 0.79])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)
_SKY_HORIZON = np.array([0.78, 0.84, 0.9])
_SKY_ZENITH = np.array([0.42, 0.6, 0.85])


@dataclass(frozen=True)
class Box:
    """Upright box resting on the ground; ``l`` runs along ``yaw``."""

    x: float
    y: float
    yaw: float
    l: float  # noqa: E741
    w: float
    h: float
    color: tuple[float, float, float]
    ident: int = -1


def camera_rays(calib: CameraCalibration) -> tuple[np.ndarray, np.ndarray]:
    """World-space origin and unit directions ``(H, W, 3)`` through pixel centers."""
    W, H = calib.image_size
    v, u = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    d_cam = pix @ np.linalg.inv(calib.K).T
    d = d_cam @ calib.R  # R^T applied to row vectors
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return calib.center, d


def _hit_box(origin: np.ndarray, dirs: np.ndarray, box: Box):
    """Ray/box slab test. Returns hit distance (inf on miss) and local face normal axis."""
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    o = origin - np.array([box.x, box.y, box.h / 2])
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    ol = rot @ o
    dl = dirs @ rot.T
    half = np.array([box.l / 2, box.w / 2, box.h / 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t1 = (-half - ol) * inv
        t2 = (half - ol) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # axis-parallel rays outside the slab give nan/inf; treat as no constraint or miss
    par = dl == 0
    outside = par & (np.abs(ol) > half)
    tmin = np.where(par, -np.inf, tmin)
    tmax = np.where(par, np.inf, tmax)
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    axis = tmin.argmax(axis=-1)
    hit = (near <= far) & (near > 0) & ~outside.any(axis=-1)
    t = np.where(hit, near, np.inf)
    # sign of the entered face is opposite to the ray direction along that axis
    sign = -np.sign(np.take_along_axis(dl, axis[..., None], axis=-1)[..., 0])
    normal_local = np.zeros(dirs.shape)
    np.put_along_axis(normal_local, axis[..., None], sign[..., None], axis=-1)
    normal = normal_local @ rot  # back to world (rot^T on row vectors)
    return t, normal


def _shade(color, normal):
    lam = np.clip(normal @ _LIGHT, 0.0, None)
    return np.asarray(color) * (0.45 + 0.55 * lam[..., None])


def render_static(calib: CameraCalibration, ground_color_fn, structures) -> tuple[np.ndarray, np.ndarray]:
    """Render ground, sky and static structures. Returns float RGB and depth."""
    origin, dirs = camera_rays(calib)
    dz = dirs[..., 2]
    with np.errstate(divide="ignore"):
        t_ground = np.where(dz < 0, -origin[2] / dz, np.inf)
    ground = np.isfinite(t_ground)
    rgb = np.empty(dirs.shape)
    elev = np.clip(dz, 0.0, 1.0)[..., None]
    rgb[...] = _SKY_HORIZON + (_SKY_ZENITH - _SKY_HORIZON) * np.sqrt(elev)
    gp = origin[:2] + dirs[ground][:, :2] * t_ground[ground][:, None]
    rgb[ground] = ground_color_fn(gp[:, 0], gp[:, 1])
    depth = t_ground.copy()
    for box in structures:
        t, n = _hit_box(origin, dirs, box)
        closer = t < depth
        rgb[closer] = _shade(box.color, n[closer])
        depth[closer] = t[closer]
    return rgb, depth


def _screen_window(calib: CameraCalibration, box: Box):
    """Pixel window ``(r0, r1, c0, c1)`` containing the box, ``None`` if off-screen,
    or the full image when a corner is too close to or behind the camera."""
    W, H = calib.image_size
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    lx = np.array([1, 1, -1, -1]) * box.l / 2
    ly = np.array([1, -1, 1, -1]) * box.w / 2
    xs = box.x + c * lx - s * ly
    ys = box.y + s * lx + c * ly
    pts = np.concatenate(
        [np.stack([xs, ys, np.zeros(4)], 1), np.stack([xs, ys, np.full(4, box.h)], 1)]
    )
    uv, depth = project_world_point(calib, pts)
    if np.any(depth <= 1e-3):
        if np.all(depth <= 0):
            return None
        return 0, H, 0, W
    c0 = max(int(np.floor(uv[:, 0].min())) - 1, 0)
    c1 = min(int(np.ceil(uv[:, 0].max())) + 1, W)
    r0 = max(int(np.floor(uv[:, 1].min())) - 1, 0)
    r1 = min(int(np.ceil(uv[:, 1].max())) + 1, H)
    if c0 >= c1 or r0 >= r1:
        return None
    return r0, r1, c0, c1


def render_agents(calib: CameraCalibration, background: np.ndarray, depth: np.ndarray, boxes):
    """Composite agent boxes over a rendered background with depth testing.

    Returns the uint8 image and an id buffer (-1 where no agent is visible).
    """
    origin, dirs = camera_rays(calib)
    img = background.copy()
    ids = np.full(depth.shape, -1, dtype=np.int64)
    zbuf = depth.copy()
    for box in boxes:
        win = _screen_window(calib, box)
        if win is None:
            continue
        r0, r1, c0, c1 = win
        t, n = _hit_box(origin, dirs[r0:r1, c0:c1], box)
        sub = zbuf[r0:r1, c0:c1]
        closer = t < sub
        if not closer.any():
            continue
        img[r0:r1, c0:c1][closer] = to_uint8(_shade(box.color, n[closer]))
        ids[r0:r1, c0:c1][closer] = box.ident
        sub[closer] = t[closer]
    return img, ids


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def tight_boxes(ids: np.ndarray) -> dict[int, list[float]]:
    """Pixel-edge boxes ``[x_min, y_min, x_max, y_max]`` around each visible id."""
    out = {}
    for ident in np.unique(ids):
        if ident < 0:
            continue
        rows, cols = np.nonzero(ids == ident)
        out[int(ident)] = [float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1)]
    return out
