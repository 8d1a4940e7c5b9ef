"""Camera-fusion occupancy models and their persistence."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
from torch import nn

from ..geometry import apply_projection
from .aggregators import (
    AvgPoolAggregator,
    ConvAggregator,
    DeformableAggregator,
    OccupancyHead,
    late_fuse,
    prob_to_logit,
)
from .backbone import Backbone

AGGREGATORS = ("late", "conv", "deformable", "avgpool")
CHECKPOINT_FORMAT = "bevocc-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    aggregator: str = "avgpool"
    use_background: bool = False
    backbone_channels: int = 64
    bottleneck_channels: int = 64
    head_channels: int = 32
    num_views: int = 4
    deform_heads: int = 4
    deform_points: int = 4
    # grid the model was trained for; origins are per scene
    grid_size: int = 480
    grid_resolution: float = 0.31
    max_range: float = 100.0

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.aggregator == "late" and self.use_background:
            raise ValueError("background integration applies to early-fusion aggregators only")
        limit = 2 * self.backbone_channels if self.use_background else self.backbone_channels
        if self.aggregator != "late" and not 1 <= self.bottleneck_channels <= limit:
            raise ValueError(f"bottleneck_channels must be in [1, {limit}]")
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def diff(self, other: "ModelConfig") -> dict:
        a, b = self.to_dict(), other.to_dict()
        return {k: (a[k], b[k]) for k in a if a[k] != b[k]}


def integrate_background(cur: torch.Tensor, bg: torch.Tensor, bottleneck: nn.Conv2d) -> torch.Tensor:
    """Concatenate current and background features along channels, then 1x1 conv.

    ``(..., C, h, w)`` twice -> ``(..., C', h, w)``.
    """
    if cur.shape != bg.shape:
        raise ValueError(f"current {tuple(cur.shape)} and background {tuple(bg.shape)} features differ")
    x = torch.cat([cur, bg], dim=-3)
    lead = x.shape[:-3]
    y = bottleneck(x.reshape(-1, *x.shape[-3:]))
    return y.reshape(*lead, *y.shape[1:])


class BevOccupancyModel(nn.Module):
    """N camera images (+ N backgrounds) to two-channel BEV occupancy logits.

    Submodules are grouped as ``backbone``, ``bottleneck``, ``aggregator`` and
    ``head``; the freeze strategies in training operate on these groups.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.backbone_channels
        self.backbone = Backbone(C)
        if cfg.aggregator == "late":
            self.bottleneck = None
            self.aggregator = None
            self.head = OccupancyHead(C, cfg.head_channels)
            return
        in_ch = 2 * C if cfg.use_background else C
        Cb = cfg.bottleneck_channels
        self.bottleneck = nn.Conv2d(in_ch, Cb, 1)
        if cfg.aggregator == "conv":
            self.aggregator = ConvAggregator(cfg.num_views, Cb)
        elif cfg.aggregator == "deformable":
            self.aggregator = DeformableAggregator(cfg.num_views, Cb, cfg.deform_heads, cfg.deform_points)
        else:
            self.aggregator = AvgPoolAggregator(Cb)
        self.head = OccupancyHead(self.aggregator.out_channels, cfg.head_channels)

    @property
    def is_late(self) -> bool:
        return self.cfg.aggregator == "late"

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {"backbone": [], "bottleneck": [], "aggregator": [], "head": []}
        for name, p in self.named_parameters():
            groups[name.split(".", 1)[0]].append((name, p))
        return groups

    def init_background_identity(self) -> None:
        """Bottleneck passes current-image channels through and ignores the background."""
        if self.bottleneck is None:
            raise ValueError("late fusion has no bottleneck")
        C = self.cfg.backbone_channels
        if self.cfg.bottleneck_channels != C:
            raise ValueError("identity init needs bottleneck_channels == backbone_channels")
        with torch.no_grad():
            self.bottleneck.weight.zero_()
            self.bottleneck.weight[:, :C, 0, 0] = torch.eye(C)
            self.bottleneck.bias.zero_()

    def view_features(self, images, backgrounds=None, bg_features=None) -> torch.Tensor:
        """Image-domain per-view features ``(B, N, C', h, w)``."""
        feats = self.backbone(images)
        if self.bottleneck is None:
            return feats
        if self.cfg.use_background:
            if bg_features is None:
                if backgrounds is None:
                    raise ValueError("model uses background integration but no backgrounds given")
                bg_features = self.backbone(backgrounds)
            return integrate_background(feats, bg_features, self.bottleneck)
        lead = feats.shape[:-3]
        y = self.bottleneck(feats.reshape(-1, *feats.shape[-3:]))
        return y.reshape(*lead, *y.shape[1:])

    def fuse(self, bev: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """BEV features ``(B, N, C', G_h, G_w)`` to logits ``(B, 2, G_h, G_w)``."""
        if self.is_late:
            B, N, C, Gh, Gw = bev.shape
            per_view = self.head(bev.reshape(B * N, C, Gh, Gw)).reshape(B, N, 2, Gh, Gw)
            return prob_to_logit(late_fuse(torch.sigmoid(per_view), masks))
        return self.head(self.aggregator(bev, masks))

    def forward(self, images, tables, backgrounds=None, bg_features=None) -> torch.Tensor:
        """``images`` ``(B, N, 3, H, W)``; ``tables`` = (index, wx, wy, mask) stacked
        per sample and view, as produced by :func:`bevocc.geometry.projection_table`."""
        index, wx, wy, mask = tables
        feats = self.view_features(images, backgrounds, bg_features)
        bev = apply_projection(feats, index, wx, wy, mask)
        return self.fuse(bev, mask)


class BackgroundFeatureCache:
    """Backbone features of background images keyed by ``(scene_id, camera_id)``.

    Entries are dropped whenever any backbone parameter is modified in place
    (optimizer steps, ``load_state_dict``).
    """

    def __init__(self, backbone: nn.Module):
        self.backbone = backbone
        self._store: dict = {}
        self._stamp = self._fingerprint()
        self.hits = 0
        self.misses = 0

    def _fingerprint(self):
        return tuple((p.data_ptr(), p._version) for p in self.backbone.parameters())

    def invalidate(self) -> None:
        self._store.clear()
        self._stamp = self._fingerprint()

    def compute(self, image: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.backbone(image.unsqueeze(0))[0]

    def get(self, key, image: torch.Tensor) -> torch.Tensor:
        if self._fingerprint() != self._stamp:
            self.invalidate()
        if key in self._store:
            self.hits += 1
            return self._store[key]
        self.misses += 1
        feat = self.compute(image)
        self._store[key] = feat
        return feat

    def __len__(self) -> int:
        return len(self._store)


def save_checkpoint(model: BevOccupancyModel, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": model.cfg.to_dict(),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> tuple[BevOccupancyModel, dict]:
    """Load a checkpoint; if ``expect`` is given, refuse a config mismatch."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT or "version" not in blob:
        raise ValueError(f"{path} is not a bevocc checkpoint")
    if blob["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {blob['version']} is newer than supported")
    cfg = ModelConfig.from_dict(blob["model_config"])
    if expect is not None and cfg != expect:
        diff = cfg.diff(expect)
        lines = ", ".join(f"{k}: checkpoint={a!r} requested={b!r}" for k, (a, b) in sorted(diff.items()))
        raise ValueError(f"checkpoint config mismatch: {lines}")
    model = BevOccupancyModel(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("extra", {})
