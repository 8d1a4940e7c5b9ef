import torch
from torch import nn
import torch.nn.functional as F


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, padding=dilation, dilation=dilation, bias=False)
        self.n1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, padding=dilation, dilation=dilation, bias=False)
        self.n2 = _norm(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), _norm(out_ch))

    def forward(self, x):
        y = F.relu(self.n1(self.conv1(x)))
        y = self.n2(self.conv2(y))
        s = x if self.shortcut is None else self.shortcut(x)
        return F.relu(y + s)


class Backbone(nn.Module):
    """Residual encoder with total stride 4.

    The two later stages that would normally downsample keep stride 1 and
    dilate instead (2, 2, 4), so spatial resolution stays at 1/4.
    """

    stride = 4

    def __init__(self, channels: int = 64):
        super().__init__()
        mid = max(channels // 2, 8)
        self.stem = nn.Sequential(nn.Conv2d(3, mid, 3, 2, 1, bias=False), _norm(mid), nn.ReLU(inplace=True))
        self.layer1 = ResBlock(mid, channels, stride=2)
        self.layer2 = ResBlock(channels, channels, dilation=2)
        self.layer3 = ResBlock(channels, channels, dilation=2)
        self.layer4 = ResBlock(channels, channels, dilation=4)
        self.out_channels = channels
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(..., 3, H, W)`` in [0, 1] to ``(..., C, ceil(H/4), ceil(W/4))``."""
        if images.dim() < 4 or images.shape[-3] != 3:
            raise ValueError(f"expected (..., 3, H, W) images, got {tuple(images.shape)}")
        lead = images.shape[:-3]
        x = images.reshape(-1, *images.shape[-3:])
        x = self.stem(x - 0.5)
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return x.reshape(*lead, *x.shape[1:])
