"""Loading scenes into tensors ready for the fusion models."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import BevGridSpec, CameraCalibration, fit_grid_to_coverage, projection_table
from .models.backbone import Backbone
from .rasterizer import AgentAnnotation, OccupancyMap, build_ground_truth, load_occupancy
from .scenegen import DatasetManifest, Scene, camera_dir, frame_name, render_frame


@dataclass(frozen=True)
class GridConfig:
    size: int = 480
    resolution: float = 0.31
    max_range: float = 100.0
    pedestrian_sigma: float = 1.0


@dataclass
class SceneData:
    scene_id: str
    calibs: list[CameraCalibration]
    grid: BevGridSpec
    frame_ids: list[int]
    images: torch.Tensor  # (F, N, 3, H, W) uint8
    backgrounds: torch.Tensor  # (N, 3, H, W) uint8
    targets: torch.Tensor  # (F, 2, G_h, G_w) float32
    tables: tuple[torch.Tensor, ...]  # index (N, 4, Q), wx (N, Q), wy (N, Q), mask (N, G_h, G_w)
    annotations: list[list[AgentAnnotation]] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return len(self.frame_ids)

    @property
    def num_views(self) -> int:
        return len(self.calibs)

    @property
    def coverage(self) -> torch.Tensor:
        return self.tables[3]

    def subset(self, idx) -> "SceneData":
        idx = list(idx)
        return SceneData(
            self.scene_id, self.calibs, self.grid, [self.frame_ids[i] for i in idx], self.images[idx],
            self.backgrounds, self.targets[idx], self.tables,
            [self.annotations[i] for i in idx] if self.annotations else [],
        )


def _hwc_to_chw(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))


def _read_png(path: Path) -> np.ndarray:
    try:
        return np.asarray(Image.open(path).convert("RGB"))
    except OSError as e:
        raise OSError(f"cannot read image {path}: {e}") from e


def build_tables(calibs, grid: BevGridSpec, max_range: float, stride: int = Backbone.stride):
    tabs = [projection_table(c, grid, stride, max_range) for c in calibs]
    return (
        torch.from_numpy(np.stack([t.index for t in tabs])),
        torch.from_numpy(np.stack([t.wx for t in tabs])).float(),
        torch.from_numpy(np.stack([t.wy for t in tabs])).float(),
        torch.from_numpy(np.stack([t.mask for t in tabs])),
    )


def _targets(annotations, grid, cfg: GridConfig) -> torch.Tensor:
    maps = [build_ground_truth(a, grid, cfg.pedestrian_sigma).stack() for a in annotations]
    return torch.from_numpy(np.stack(maps)) if maps else torch.zeros(0, 2, *grid.shape)


def scene_from_memory(scene: Scene, cfg: GridConfig, frames=None) -> SceneData:
    """Render a generated scene straight into tensors (no disk round trip)."""
    frames = list(range(scene.spec.num_frames)) if frames is None else list(frames)
    grid = fit_grid_to_coverage(scene.cameras, cfg.resolution, cfg.size, cfg.max_range)
    rendered = [render_frame(scene, f) for f in frames]
    images = torch.stack([torch.stack([_hwc_to_chw(im) for im in fr.images]) for fr in rendered])
    bgs = torch.stack([_hwc_to_chw(b) for b in scene.backgrounds()])
    ann = [fr.annotations for fr in rendered]
    return SceneData(
        scene.spec.scene_id, list(scene.cameras), grid, frames, images, bgs,
        _targets(ann, grid, cfg), build_tables(scene.cameras, grid, cfg.max_range), ann,
    )


def load_calibrations(path: Path) -> list[CameraCalibration]:
    d = json.loads(Path(path).read_text())
    return [CameraCalibration.from_dict(c) for c in d["cameras"]]


def read_annotations(path: Path) -> dict[int, list[AgentAnnotation]]:
    out = {}
    if not path.exists():
        return out
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[int(rec["frame_id"])] = [AgentAnnotation.from_dict(a) for a in rec["agents"]]
    return out


def occupancy_prefix(root: Path, scene_id: str, frame_id: int) -> Path:
    return Path(root) / scene_id / "occupancy" / f"frame{frame_id:04d}"


def load_scene(root: str | Path, scene_id: str, cfg: GridConfig, frames=None) -> SceneData:
    """Load one scene from the dataset layout.

    Ground truth comes from stored occupancy maps when the scene has them
    (``<scene>/occupancy/frame<nnnn>_{vehicle,pedestrian}.png`` plus JSON
    sidecar), otherwise it is rasterized from ``annotations.jsonl``.
    """
    root = Path(root)
    manifest = DatasetManifest.load(root)
    entry = next((s for s in manifest.scenes if s.scene_id == scene_id), None)
    if entry is None:
        raise KeyError(f"scene {scene_id!r} not in {root / 'manifest.json'}")
    calibs = load_calibrations(root / entry.calibration)
    frames = list(range(entry.num_frames)) if frames is None else list(frames)
    ann = read_annotations(root / scene_id / "annotations.jsonl")

    stored = [occupancy_prefix(root, scene_id, f) for f in frames]
    if frames and all(Path(f"{p}.json").exists() for p in stored):
        maps: list[OccupancyMap] = [load_occupancy(p) for p in stored]
        grid = maps[0].spec
        if grid.shape != (cfg.size, cfg.size):
            raise ValueError(f"{scene_id}: stored grid {grid.shape} does not match configured size {cfg.size}")
        targets = torch.from_numpy(np.stack([m.stack() for m in maps]))
    else:
        missing = [f for f in frames if f not in ann]
        if missing:
            raise ValueError(f"{scene_id}: no ground truth for frames {missing[:5]}")
        grid = fit_grid_to_coverage(calibs, cfg.resolution, cfg.size, cfg.max_range)
        targets = _targets([ann[f] for f in frames], grid, cfg)

    bgs = torch.stack([_hwc_to_chw(_read_png(camera_dir(root, scene_id, k) / "background.png"))
                       for k in range(len(calibs))])
    images = torch.stack([
        torch.stack([_hwc_to_chw(_read_png(camera_dir(root, scene_id, k) / frame_name(f)))
                     for k in range(len(calibs))])
        for f in frames
    ]) if frames else torch.zeros(0, len(calibs), *bgs.shape[1:], dtype=torch.uint8)
    return SceneData(
        scene_id, calibs, grid, frames, images, bgs, targets,
        build_tables(calibs, grid, cfg.max_range), [ann.get(f, []) for f in frames],
    )


def load_dataset(root: str | Path, cfg: GridConfig, scene_ids=None, max_frames: int | None = None) -> list[SceneData]:
    manifest = DatasetManifest.load(root)
    wanted = [s.scene_id for s in manifest.scenes] if scene_ids is None else list(scene_ids)
    by_id = {s.scene_id: s for s in manifest.scenes}
    out = []
    for sid in wanted:
        if sid not in by_id:
            raise KeyError(f"scene {sid!r} not in dataset {root}")
        n = by_id[sid].num_frames if max_frames is None else min(max_frames, by_id[sid].num_frames)
        out.append(load_scene(root, sid, cfg, range(n)))
    return out


@dataclass
class Batch:
    images: torch.Tensor  # (B, N, 3, H, W) float in [0, 1]
    backgrounds: torch.Tensor
    tables: tuple[torch.Tensor, ...]
    targets: torch.Tensor  # (B, 2, G_h, G_w)
    keys: list[tuple[str, int]]  # (scene_id, frame_id)

    @property
    def coverage(self) -> torch.Tensor:
        """Combined any-camera coverage ``(B, G_h, G_w)``."""
        return self.tables[3].any(dim=1)


def make_batch(items, keep_views=None) -> Batch:
    """Collate ``(SceneData, frame_index)`` pairs.

    ``keep_views`` (0-based camera indices) blanks every other view: its
    coverage is cleared so its projected features are zero.
    """
    images = torch.stack([s.images[i] for s, i in items]).float().div_(255.0)
    bgs = torch.stack([s.backgrounds for s, _ in items]).float().div_(255.0)
    tables = tuple(torch.stack([s.tables[k] for s, _ in items]) for k in range(4))
    if keep_views is not None:
        keep = torch.zeros(tables[3].shape[1], dtype=torch.bool)
        keep[list(keep_views)] = True
        tables = (*tables[:3], tables[3] & keep.view(1, -1, 1, 1))
    targets = torch.stack([s.targets[i] for s, i in items])
    return Batch(images, bgs, tables, targets, [(s.scene_id, s.frame_ids[i]) for s, i in items])
