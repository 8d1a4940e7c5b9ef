"""BEV-space fusion of per-view projected features.

Every aggregator takes ``bev`` shaped ``(B, N, C, G_h, G_w)`` and coverage
``masks`` shaped ``(B, N, G_h, G_w)``; uncovered view cells are already zero.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F


def masked_view_mean(values: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Mean over covering views, zero where no view covers.

    Values are sorted along the view axis before summation, which makes the
    result bitwise invariant to view order and to extra all-zero views.
    """
    m = masks.unsqueeze(2).to(values.dtype)
    v = values * m
    total = torch.sort(v, dim=1).values.sum(dim=1)
    count = m.sum(dim=1)
    return torch.where(count > 0, total / count.clamp(min=1), torch.zeros((), dtype=values.dtype))


class AvgPoolAggregator(nn.Module):
    """Parameter-free masked average over views."""

    def __init__(self, channels: int):
        super().__init__()
        self.out_channels = channels

    def forward(self, bev, masks):
        return masked_view_mean(bev, masks)


class ConvAggregator(nn.Module):
    """Views stacked channel-wise (camera order matters) and mixed by three
    dilated 3x3 convolutions (dilation 1, 2, 4)."""

    def __init__(self, num_views: int, channels: int, out_channels: int | None = None):
        super().__init__()
        out = out_channels or channels
        self.num_views = num_views
        self.layers = nn.ModuleList(
            [
                nn.Conv2d(num_views * channels, out, 3, padding=1, dilation=1),
                nn.Conv2d(out, out, 3, padding=2, dilation=2),
                nn.Conv2d(out, out, 3, padding=4, dilation=4),
            ]
        )
        self.out_channels = out

    def forward(self, bev, masks):
        B, N, C, H, W = bev.shape
        if N != self.num_views:
            raise ValueError(f"conv aggregator built for {self.num_views} views, got {N}")
        x = bev.reshape(B, N * C, H, W)
        for conv in self.layers:
            x = F.relu(conv(x))
        return x


def deformable_sample(values: torch.Tensor, locations: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Attention-weighted bilinear samples.

    ``values``: ``(B, N, heads, d, G_h, G_w)``; ``locations``: ``(B, Q, heads, N, K, 2)``
    as ``(x, y)`` grid coordinates; ``weights``: ``(B, Q, heads, N, K)``.
    Returns ``(B, Q, heads, d)``. Out-of-grid samples use border values, so
    spatially constant values give back that constant.
    """
    B, N, Hh, d, Gh, Gw = values.shape
    Q, K = locations.shape[1], locations.shape[4]
    v = values.reshape(B * N * Hh, d, Gh, Gw)
    loc = locations.permute(0, 3, 2, 1, 4, 5).reshape(B * N * Hh, Q, K, 2)
    norm = torch.stack(
        [loc[..., 0] * (2.0 / max(Gw - 1, 1)) - 1.0, loc[..., 1] * (2.0 / max(Gh - 1, 1)) - 1.0], dim=-1
    )
    sampled = F.grid_sample(v, norm, mode="bilinear", padding_mode="border", align_corners=True)
    sampled = sampled.reshape(B, N, Hh, d, Q, K)
    w = weights.permute(0, 3, 2, 1, 4).unsqueeze(3)  # (B, N, heads, 1, Q, K)
    out = (sampled * w).sum(dim=(1, 5))  # (B, heads, d, Q)
    return out.permute(0, 3, 1, 2)


class DeformableAggregator(nn.Module):
    """One deformable attention block over all views followed by a residual FFN.

    Each BEV cell forms a query from the masked mean of the views' features.
    Per head it predicts ``points`` sampling offsets (in cells) in every view
    and a softmax over the ``views * points`` slots; slots of views that do not
    cover the query cell are excluded.
    """

    def __init__(self, num_views: int, channels: int, heads: int = 4, points: int = 4):
        super().__init__()
        if heads < 1 or points < 1:
            raise ValueError("deformable attention needs at least one head and one point")
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.num_views, self.heads, self.points = num_views, heads, points
        self.channels = channels
        self.out_channels = channels
        self.value_proj = nn.Linear(channels, channels)
        self.sampling_offsets = nn.Linear(channels, heads * num_views * points * 2)
        self.attention_weights = nn.Linear(channels, heads * num_views * points)
        self.output_proj = nn.Linear(channels, channels)
        self.norm1 = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(nn.Linear(channels, 2 * channels), nn.ReLU(), nn.Linear(2 * channels, channels))
        self.norm2 = nn.LayerNorm(channels)
        nn.init.zeros_(self.sampling_offsets.weight)
        nn.init.zeros_(self.sampling_offsets.bias)
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)

    def attention(self, bev, masks):
        """Returns ``(attended (B, Q, C), locations, weights)`` before the output projection."""
        B, N, C, Gh, Gw = bev.shape
        if N != self.num_views:
            raise ValueError(f"deformable aggregator built for {self.num_views} views, got {N}")
        Hh, K = self.heads, self.points
        Q = Gh * Gw
        query = masked_view_mean(bev, masks).flatten(2).transpose(1, 2)  # (B, Q, C)

        offsets = self.sampling_offsets(query).view(B, Q, Hh, N, K, 2)
        gy, gx = torch.meshgrid(
            torch.arange(Gh, dtype=bev.dtype, device=bev.device),
            torch.arange(Gw, dtype=bev.dtype, device=bev.device),
            indexing="ij",
        )
        ref = torch.stack([gx, gy], dim=-1).reshape(1, Q, 1, 1, 1, 2)
        locations = ref + offsets

        logits = self.attention_weights(query).view(B, Q, Hh, N, K)
        cover = masks.flatten(2).transpose(1, 2).reshape(B, Q, 1, N, 1)
        # uncovered slots get the dtype minimum: exactly zero weight, uniform when nothing covers
        logits = logits.masked_fill(~cover, torch.finfo(logits.dtype).min)
        weights = F.softmax(logits.reshape(B, Q, Hh, N * K), dim=-1).view(B, Q, Hh, N, K)

        values = self.value_proj(bev.permute(0, 1, 3, 4, 2))  # (B, N, Gh, Gw, C)
        values = values.view(B, N, Gh, Gw, Hh, C // Hh).permute(0, 1, 4, 5, 2, 3)
        attended = deformable_sample(values, locations, weights).reshape(B, Q, C)
        return attended, locations, weights, query

    def forward(self, bev, masks):
        B, N, C, Gh, Gw = bev.shape
        attended, _, _, query = self.attention(bev, masks)
        x = self.norm1(query + self.output_proj(attended))
        x = self.norm2(x + self.ffn(x))
        return x.transpose(1, 2).reshape(B, C, Gh, Gw)


class OccupancyHead(nn.Module):
    """Small conv head; channel 0 is vehicles, channel 1 pedestrians (logits)."""

    def __init__(self, in_channels: int, hidden: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=2, dilation=2)
        self.out = nn.Conv2d(hidden, 2, 1)
        nn.init.constant_(self.out.bias, -2.0)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return self.out(x)


def late_fuse(view_probs: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Average per-view probabilities ``(B, N, 2, G_h, G_w)`` over covering views."""
    return masked_view_mean(view_probs, masks)


_EPS = 1e-6


def prob_to_logit(p: torch.Tensor) -> torch.Tensor:
    p = p.clamp(_EPS, 1 - _EPS)
    return torch.log(p) - torch.log1p(-p)
