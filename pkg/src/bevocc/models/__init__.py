from .aggregators import (
    AvgPoolAggregator,
    ConvAggregator,
    DeformableAggregator,
    OccupancyHead,
    deformable_sample,
    late_fuse,
    masked_view_mean,
)
from .backbone import Backbone
from .fusion import (
    AGGREGATORS,
    BackgroundFeatureCache,
    BevOccupancyModel,
    ModelConfig,
    integrate_background,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "AGGREGATORS",
    "AvgPoolAggregator",
    "Backbone",
    "BackgroundFeatureCache",
    "BevOccupancyModel",
    "ConvAggregator",
    "DeformableAggregator",
    "ModelConfig",
    "OccupancyHead",
    "deformable_sample",
    "integrate_background",
    "late_fuse",
    "load_checkpoint",
    "masked_view_mean",
    "save_checkpoint",
]
