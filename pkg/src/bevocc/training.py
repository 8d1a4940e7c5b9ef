"""Loss, optimization loop and few-shot fine-tuning."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import SceneData, make_batch
from .models import BevOccupancyModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step


class FreezeMode(str, enum.Enum):
    NONE = "none"
    FREEZE_BACKBONE_BOTTLENECK = "freeze_backbone_bottleneck"
    FREEZE_AGG_HEAD = "freeze_agg_head"


_FROZEN_GROUPS = {
    FreezeMode.NONE: (),
    FreezeMode.FREEZE_BACKBONE_BOTTLENECK: ("backbone", "bottleneck"),
    FreezeMode.FREEZE_AGG_HEAD: ("aggregator", "head"),
}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    batch_size: int = 2
    epochs: int = 8
    seed: int = 0
    lambda_v: float = 1.0
    lambda_p: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    focal: bool = False
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.lambda_v <= 0 or self.lambda_p <= 0:
            raise ValueError("loss weights must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("invalid optimization settings")

    @classmethod
    def default_schedule(cls, aggregator: str, **overrides) -> "TrainConfig":
        """Early fusion: lr 0.005, batch 2, 8 epochs. Late fusion: lr 0.05, batch 1."""
        if aggregator == "late":
            base = cls(learning_rate=0.05, batch_size=1, epochs=8)
        else:
            base = cls(learning_rate=0.005, batch_size=2, epochs=8)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_loss(
    logits: torch.Tensor,
    target: torch.Tensor,
    coverage: torch.Tensor | None = None,
    lambda_v: float = 1.0,
    lambda_p: float = 1.0,
    focal: bool = False,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Coverage-masked per-cell BCE summed over the two channels.

    ``logits``/``target`` are ``(..., 2, G_h, G_w)``; ``coverage`` is
    ``(..., G_h, G_w)`` and defaults to every cell.
    """
    if logits.shape != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    if torch.isnan(logits).any():
        raise ValueError("NaN in logits")
    bce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    if focal:
        p = torch.sigmoid(logits)
        pt = p * target + (1 - p) * (1 - target)
        bce = bce * (1 - pt) ** gamma
    per_cell = lambda_v * bce[..., 0, :, :] + lambda_p * bce[..., 1, :, :]
    if coverage is None:
        return per_cell.mean()
    m = coverage.to(per_cell.dtype)
    return (per_cell * m).sum() / m.sum().clamp(min=1.0)


def freeze_partition(model: BevOccupancyModel, mode: FreezeMode | str) -> tuple[list[str], list[str]]:
    """Names of ``(frozen, trainable)`` parameters; together they cover the model exactly."""
    mode = FreezeMode(mode)
    frozen, trainable = [], []
    for group, params in model.parameter_groups().items():
        target = frozen if group in _FROZEN_GROUPS[mode] else trainable
        target.extend(name for name, _ in params)
    return frozen, trainable


def _set_trainable(model: BevOccupancyModel, trainable: set[str]) -> list[torch.nn.Parameter]:
    params = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable)
        if name in trainable:
            params.append(p)
    return params


def _append_jsonl(path: Path | None, rec: dict) -> None:
    if path is None:
        return
    with open(path, "a") as f:
        f.write(json.dumps(rec, sort_keys=True) + "\n")


def train(
    model: BevOccupancyModel,
    scenes: list[SceneData],
    cfg: TrainConfig,
    heldout: list[SceneData] | None = None,
    metrics_path: str | Path | None = None,
    freeze: FreezeMode | str = FreezeMode.NONE,
    items: list[tuple[SceneData, int]] | None = None,
) -> list[dict]:
    """SGD with momentum over all frames of ``scenes`` (or the explicit ``items``).

    Returns the per-epoch metric records, which are also appended to
    ``metrics_path`` as JSON lines when given.
    """
    from .evaluation import ModelPredictor, evaluate

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    metrics_path = Path(metrics_path) if metrics_path else None
    _, trainable = freeze_partition(model, freeze)
    params = _set_trainable(model, set(trainable))
    if not params:
        raise ValueError("nothing to train: every parameter is frozen")
    opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    if items is None:
        items = [(s, i) for s in scenes for i in range(s.num_frames)]
    if not items:
        raise ValueError("no training samples")

    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(items))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = make_batch([items[k] for k in order[start : start + cfg.batch_size]])
            bgs = batch.backgrounds if model.cfg.use_background else None
            logits = model(batch.images, batch.tables, backgrounds=bgs)
            if not torch.isfinite(logits).all():
                raise TrainingDiverged(step, float("nan"))
            loss = compute_loss(
                logits, batch.targets, batch.coverage, cfg.lambda_v, cfg.lambda_p, cfg.focal, cfg.focal_gamma
            )
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, float(loss))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        rec = {"epoch": epoch, "split": "train", "loss": float(np.mean(losses)),
               "iou_vehicle": None, "iou_pedestrian": None, "iou_mean": None}
        history.append(rec)
        _append_jsonl(metrics_path, rec)
        log.info("epoch %d train loss %.5f", epoch, rec["loss"])
        if heldout:
            model.eval()
            report = evaluate(ModelPredictor(model), heldout, loss_cfg=cfg)
            agg = report.aggregate
            rec = {"epoch": epoch, "split": "heldout", "loss": agg["loss"],
                   "iou_vehicle": agg["iou_vehicle"], "iou_pedestrian": agg["iou_pedestrian"],
                   "iou_mean": agg["iou_mean"]}
            history.append(rec)
            _append_jsonl(metrics_path, rec)
            log.info("epoch %d heldout vehicle IoU %.4f", epoch, agg["iou_vehicle"])
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return history


def select_samples(scenes: list[SceneData], num_samples: int, seed: int) -> list[tuple[SceneData, int]]:
    """Random ``num_samples`` frames (seeded) across ``scenes``."""
    pool = [(s, i) for s in scenes for i in range(s.num_frames)]
    if num_samples > len(pool):
        raise ValueError(f"asked for {num_samples} samples but only {len(pool)} frames are available")
    idx = np.random.default_rng(seed).choice(len(pool), size=num_samples, replace=False)
    return [pool[k] for k in sorted(idx)]


def finetune(
    model: BevOccupancyModel,
    scenes: list[SceneData],
    mode: FreezeMode | str,
    cfg: TrainConfig,
    num_samples: int = 24,
    metrics_path: str | Path | None = None,
) -> tuple[BevOccupancyModel, list[tuple[str, int]]]:
    """Few-shot fine-tuning on ``num_samples`` frames; only the non-frozen
    groups change. Returns the model and the ``(scene_id, frame_id)`` used."""
    if num_samples < 1:
        raise ValueError("fine-tuning needs at least one sample")
    items = select_samples(scenes, num_samples, cfg.seed)
    train(model, [], cfg, metrics_path=metrics_path, freeze=mode, items=items)
    return model, [(s.scene_id, s.frame_ids[i]) for s, i in items]

