"""IoU metric, evaluation reports, ablations and heatmap output."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image

from .data import Batch, GridConfig, SceneData, make_batch
from .models import BackgroundFeatureCache, BevOccupancyModel

METRICS = ("iou_vehicle", "iou_pedestrian", "iou_mean")


def iou(M, O) -> float:
    """Jaccard index of two binary grids; 1.0 when both are empty."""
    M = np.asarray(M, dtype=bool)
    O = np.asarray(O, dtype=bool)  # noqa: E741
    if M.shape != O.shape:
        raise ValueError(f"shape mismatch {M.shape} vs {O.shape}")
    inter = int(np.count_nonzero(M & O))
    union = int(np.count_nonzero(M)) + int(np.count_nonzero(O)) - inter
    return 1.0 if union == 0 else inter / union


class ModelPredictor:
    """Occupancy probabilities from a fusion model, optionally with views blanked.

    Background features come from a :class:`BackgroundFeatureCache`.
    """

    def __init__(self, model: BevOccupancyModel, keep_views=None, cache: BackgroundFeatureCache | None = None):
        self.model = model
        self.keep_views = keep_views
        self.cache = cache
        if model.cfg.use_background and cache is None:
            self.cache = BackgroundFeatureCache(model.backbone)

    def __call__(self, batch: Batch) -> torch.Tensor:
        self.model.eval()
        with torch.no_grad():
            bg_feats = None
            if self.model.cfg.use_background:
                bg_feats = torch.stack([
                    torch.stack([self.cache.get((sid, k), batch.backgrounds[b, k])
                                 for k in range(batch.backgrounds.shape[1])])
                    for b, (sid, _) in enumerate(batch.keys)
                ])
            return torch.sigmoid(self.model(batch.images, batch.tables, bg_features=bg_feats))


class OraclePredictor:
    """Returns the ground truth; scores IoU 1 by construction."""

    keep_views = None

    def __call__(self, batch: Batch) -> torch.Tensor:
        return batch.targets.clone()


class ZeroPredictor:
    keep_views = None

    def __call__(self, batch: Batch) -> torch.Tensor:
        return torch.zeros_like(batch.targets)


@dataclass
class EvalReport:
    model_id: str
    tag: str
    grid: dict
    per_scene: dict[str, dict] = field(default_factory=dict)
    aggregate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "tag": self.tag, "grid": self.grid,
                "per_scene": self.per_scene, "aggregate": self.aggregate}

    def to_text(self) -> str:
        rows = [(sid, *(v[m] for m in METRICS), v["frames"]) for sid, v in self.per_scene.items()]
        rows.append(("ALL", *(self.aggregate[m] for m in METRICS), self.aggregate["frames"]))
        head = f"{'scene':<16} {'IoU veh':>9} {'IoU ped':>9} {'IoU mean':>9} {'frames':>7}"
        lines = [f"# {self.model_id} {self.tag}".rstrip(), head]
        for sid, v, p, m, n in rows:
            lines.append(f"{sid:<16} {v:>9.5f} {p:>9.5f} {m:>9.5f} {n:>7d}")
        return "\n".join(lines)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def coverage_of_camera(camera: int) -> Callable[[SceneData], np.ndarray]:
    """Restriction to the 0-based ``camera``'s coverage in each scene."""
    def restrict(scene: SceneData) -> np.ndarray:
        return scene.coverage[camera].numpy()
    return restrict


def evaluate(
    predictor,
    scenes: list[SceneData],
    restrict=None,
    batch_size: int = 4,
    model_id: str = "",
    tag: str = "",
    loss_cfg=None,
) -> EvalReport:
    """Per-frame IoU, averaged over frames within a scene, then over scenes.

    ``restrict`` is a ``(G_h, G_w)`` boolean mask or a callable giving one per
    scene; prediction and ground truth are both zeroed outside it.
    ``loss_cfg`` (a TrainConfig) adds the mean held-out loss for model predictors.
    """
    from .training import compute_loss

    if not scenes:
        raise ValueError("no scenes to evaluate")
    keep = getattr(predictor, "keep_views", None)
    per_scene: dict[str, dict] = {}
    losses = []
    grid = scenes[0].grid
    for scene in scenes:
        if scene.targets.shape[0] != scene.num_frames:
            raise ValueError(f"scene {scene.scene_id} lacks ground truth")
        mask = restrict(scene) if callable(restrict) else restrict
        scores = {m: [] for m in METRICS}
        for start in range(0, scene.num_frames, batch_size):
            batch = make_batch([(scene, i) for i in range(start, min(start + batch_size, scene.num_frames))], keep)
            probs = predictor(batch)
            if loss_cfg is not None and isinstance(predictor, ModelPredictor):
                logit = torch.logit(probs.clamp(1e-6, 1 - 1e-6))
                losses.append(float(compute_loss(logit, batch.targets, batch.coverage,
                                                 loss_cfg.lambda_v, loss_cfg.lambda_p)))
            pred = (probs >= 0.5).numpy()
            gt = (batch.targets >= 0.5).numpy()
            if mask is not None:
                pred = pred & mask
                gt = gt & mask
            for b in range(pred.shape[0]):
                v = iou(pred[b, 0], gt[b, 0])
                p = iou(pred[b, 1], gt[b, 1])
                scores["iou_vehicle"].append(v)
                scores["iou_pedestrian"].append(p)
                scores["iou_mean"].append((v + p) / 2)
        per_scene[scene.scene_id] = {m: float(np.mean(scores[m])) for m in METRICS}
        per_scene[scene.scene_id]["frames"] = scene.num_frames
    aggregate = {m: float(np.mean([s[m] for s in per_scene.values()])) for m in METRICS}
    aggregate["frames"] = int(sum(s["frames"] for s in per_scene.values()))
    aggregate["loss"] = float(np.mean(losses)) if losses else None
    return EvalReport(model_id, tag, {"size": list(grid.shape), "resolution": [grid.dx, grid.dy]},
                      per_scene, aggregate)


def single_camera_ablation(model: BevOccupancyModel, scenes: list[SceneData], camera: int = 0,
                           model_id: str = "") -> dict[str, EvalReport]:
    """Score inside one camera's coverage with that camera alone vs all cameras.

    The single-camera run reuses the same weights with every other view blanked.
    """
    restrict = coverage_of_camera(camera)
    cache = BackgroundFeatureCache(model.backbone) if model.cfg.use_background else None
    single = evaluate(ModelPredictor(model, keep_views=[camera], cache=cache), scenes, restrict,
                      model_id=model_id, tag=f"camera{camera + 1}-only")
    full = evaluate(ModelPredictor(model, cache=cache), scenes, restrict,
                    model_id=model_id, tag="all-cameras")
    return {"single": single, "all": full}


def grid_size_sweep(
    load_split: Callable[[GridConfig], tuple[list[SceneData], list[SceneData]]],
    model_cfg,
    train_cfg,
    sizes,
    extent: float,
    max_range: float = 100.0,
) -> list[dict]:
    """Train and score one model per grid size at a fixed physical extent.

    ``load_split`` builds ``(train, heldout)`` scenes for a grid config; seeds
    and data are identical across sizes.
    """
    from dataclasses import replace

    from .training import train

    rows = []
    for size in sizes:
        gcfg = GridConfig(size=int(size), resolution=extent / size, max_range=max_range)
        tr, ho = load_split(gcfg)
        cfg = replace(model_cfg, grid_size=int(size), grid_resolution=extent / size, max_range=max_range)
        torch.manual_seed(train_cfg.seed)
        model = BevOccupancyModel(cfg)
        train(model, tr, train_cfg)
        report = evaluate(ModelPredictor(model), ho, model_id=f"{cfg.aggregator}{'+bg' if cfg.use_background else ''}",
                          tag=f"grid{size}")
        rows.append({"size": int(size), "resolution": extent / size, "extent": extent,
                     **{m: report.aggregate[m] for m in METRICS}, "report": report})
    return rows


def sweep_table(rows: list[dict]) -> str:
    lines = [f"{'grid':>9} {'cell (m)':>9} {'extent':>8} {'IoU veh':>9} {'IoU ped':>9} {'IoU mean':>9}"]
    for r in rows:
        lines.append(f"{r['size']:>4}x{r['size']:<4} {r['resolution']:>9.4f} {r['extent']:>8.2f} "
                     f"{r['iou_vehicle']:>9.5f} {r['iou_pedestrian']:>9.5f} {r['iou_mean']:>9.5f}")
    return "\n".join(lines)


_BG = np.array([24, 24, 28], dtype=np.float64)
_VEH = np.array([255, 96, 32], dtype=np.float64)
_PED = np.array([40, 210, 255], dtype=np.float64)


def heatmap_rgb(maps: np.ndarray, scale: int = 4) -> np.ndarray:
    """``(2, G_h, G_w)`` occupancy to an upscaled ``(G_h*s, G_w*s, 3)`` uint8 image."""
    maps = np.clip(np.asarray(maps, dtype=np.float64), 0, 1)
    if maps.ndim != 3 or maps.shape[0] != 2:
        raise ValueError(f"expected (2, G_h, G_w) maps, got {maps.shape}")
    if scale < 1:
        raise ValueError("scale must be a positive integer")
    rgb = _BG + maps[0][..., None] * (_VEH - _BG)
    rgb = rgb + maps[1][..., None] * (_PED - rgb)
    rgb = np.rint(rgb).astype(np.uint8)
    return np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)


def emit_heatmap(maps, path: str | Path, scale: int = 4, compare: np.ndarray | None = None) -> Path:
    """Write a color-mapped PNG (vehicles orange, pedestrians cyan).

    ``maps`` is an :class:`~bevocc.rasterizer.OccupancyMap` or a ``(2, G_h, G_w)``
    array; with ``compare`` the image is ``compare | maps`` side by side.
    Rows follow the grid's ``g_y`` axis (top row is ``g_y = 0``).
    """
    arr = maps.stack() if hasattr(maps, "stack") and not isinstance(maps, np.ndarray) else np.asarray(maps)
    img = heatmap_rgb(arr, scale)
    if compare is not None:
        other = compare.stack() if hasattr(compare, "stack") and not isinstance(compare, np.ndarray) else compare
        img = np.concatenate([heatmap_rgb(other, scale), img], axis=1)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(path, format="PNG")
    except OSError as e:
        raise OSError(f"failed to write heatmap {path}: {e}") from e
    return path
