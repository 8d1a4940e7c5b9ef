import math

import numpy as np
import pytest
import torch

from bevocc.geometry import CameraCalibration


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_calibration(rng: np.random.Generator, skew: bool = True) -> CameraCalibration:
    W, H = int(rng.integers(80, 400)), int(rng.integers(60, 300))
    f = rng.uniform(50, 500)
    K = np.array([[f, rng.uniform(-2, 2) if skew else 0.0, W / 2 + rng.uniform(-5, 5)],
                  [0.0, f * rng.uniform(0.9, 1.1), H / 2 + rng.uniform(-5, 5)],
                  [0.0, 0.0, 1.0]])
    R = random_rotation(rng)
    C = np.array([rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(2, 15)])
    return CameraCalibration(K, R, -R @ C, (W, H))


def roadside_camera(rng: np.random.Generator, size=(160, 90)) -> CameraCalibration:
    ang = rng.uniform(0, 2 * math.pi)
    pos = (25 * math.cos(ang), 25 * math.sin(ang), rng.uniform(5, 8))
    return CameraCalibration.from_pose(pos, ang + math.pi, math.radians(rng.uniform(-25, -10)), size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


TINY_GRID = dict(size=24, resolution=2.0, max_range=60.0)


def tiny_model_config(aggregator="avgpool", background=False, **kw):
    from bevocc.models import ModelConfig

    base = dict(backbone_channels=8, bottleneck_channels=8, head_channels=8, num_views=4,
                deform_heads=2, deform_points=2, grid_size=TINY_GRID["size"],
                grid_resolution=TINY_GRID["resolution"], max_range=TINY_GRID["max_range"])
    base.update(kw)
    return ModelConfig(aggregator, background, **base)


@pytest.fixture(scope="session")
def tiny_scenes():
    """Two small rendered scenes (64x36 images, 24x24 grid, 4 frames each)."""
    from bevocc.data import GridConfig, scene_from_memory
    from bevocc.scenegen import SceneSpec, generate_scene

    cfg = GridConfig(**TINY_GRID)
    return [
        scene_from_memory(generate_scene(SceneSpec(f"tiny{k}", rng_seed=40 + k, image_size=(64, 36),
                                                   num_frames=4, frame_interval=1.0)), cfg)
        for k in range(2)
    ]
