"""Appearance-driven separation stage.

A keyframe is encoded to a class-evidence vector, the mixture grid to a
per-class feature volume of the same channel count, and the two are fused by
a channel-weighted sum into mask logits. Thresholding is strict: a logit of
exactly zero (probability 0.5) yields mask 0.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import BinaryMask, MagGrid, apply_mask


def _width(base: int, scale: float) -> int:
    return max(8, int(round(base * scale)))


class BasicBlock2d(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if in_ch != out_ch or stride != 1:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch))
        else:
            self.down = None

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        if self.down is not None:
            x = self.down(x)
        return F.relu(x + y)


class AppearanceEncoder(nn.Module):
    """Dilated 2-D residual encoder truncated at stride 16.

    The final stage runs at dilation 2 instead of striding further; a 1x1
    projection to ``num_classes`` channels and spatial average pooling give
    the appearance vector.
    """

    def __init__(self, num_classes: int, width_scale: float = 0.25):
        super().__init__()
        w = [_width(c, width_scale) for c in (64, 128, 256, 512)]
        self.num_classes = num_classes
        self.stem = nn.Sequential(
            nn.Conv2d(3, w[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(w[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1))
        self.layer1 = nn.Sequential(BasicBlock2d(w[0], w[0]), BasicBlock2d(w[0], w[0]))
        self.layer2 = nn.Sequential(BasicBlock2d(w[0], w[1], stride=2), BasicBlock2d(w[1], w[1]))
        self.layer3 = nn.Sequential(BasicBlock2d(w[1], w[2], stride=2), BasicBlock2d(w[2], w[2]))
        self.layer4 = nn.Sequential(BasicBlock2d(w[2], w[3], dilation=2),
                                    BasicBlock2d(w[3], w[3], dilation=2))
        self.proj = nn.Conv2d(w[3], num_classes, 1)

    def forward(self, image):
        """image: [B, 3, H, W], H and W divisible by 16; returns [B, num_classes]."""
        _, _, h, w = image.shape
        if h % 16 != 0 or w % 16 != 0:
            raise ValueError(f"image size {h}x{w} not divisible by 16")
        x = self.stem(image)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        x = self.layer4(x)
        return self.proj(x).mean(dim=(2, 3))


class InvertedResidual(nn.Module):
    def __init__(self, in_ch, out_ch, expand=4, dilation=1):
        super().__init__()
        mid = in_ch * expand
        self.use_res = in_ch == out_ch
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, mid, 1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU6(inplace=True),
            nn.Conv2d(mid, mid, 3, padding=dilation, dilation=dilation,
                      groups=mid, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU6(inplace=True),
            nn.Conv2d(mid, out_ch, 1, bias=False),
            nn.BatchNorm2d(out_ch))

    def forward(self, x):
        y = self.block(x)
        return x + y if self.use_res else y


class SpectrogramEncoder(nn.Module):
    """Inverted-residual mobile encoder; keeps the grid resolution.

    All blocks run at stride 1 with growing dilation, so the output feature
    volume has the same H x W as the input grid with ``out_channels`` maps.
    """

    def __init__(self, out_channels: int, width_scale: float = 0.25,
                 input_gain: float = 1.0, log_magnitude: bool = False):
        super().__init__()
        w = [_width(c, width_scale) for c in (64, 96, 128)]
        self.out_channels = out_channels
        self.input_gain = input_gain
        self.log_magnitude = log_magnitude
        self.stem = nn.Sequential(
            nn.Conv2d(1, w[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(w[0]),
            nn.ReLU6(inplace=True))
        self.blocks = nn.Sequential(
            InvertedResidual(w[0], w[0], expand=2, dilation=1),
            InvertedResidual(w[0], w[1], expand=4, dilation=2),
            InvertedResidual(w[1], w[1], expand=4, dilation=4),
            InvertedResidual(w[1], w[2], expand=4, dilation=8),
            InvertedResidual(w[2], w[2], expand=4, dilation=16))
        self.head = nn.Conv2d(w[2], out_channels, 1)

    def forward(self, grid):
        """grid: [B, 1, H, W] magnitudes; returns [B, out_channels, H, W]."""
        x = grid * self.input_gain
        if self.log_magnitude:
            x = torch.log1p(x)
        x = self.stem(x)
        x = self.blocks(x)
        return self.head(x)


def fuse_appearance(appearance: torch.Tensor, mixture_features: torch.Tensor) -> torch.Tensor:
    """Channel-weighted sum of mixture features: [B,C] x [B,C,H,W] -> [B,1,H,W]."""
    if appearance.shape[1] != mixture_features.shape[1]:
        raise ValueError(
            f"channel mismatch: appearance {appearance.shape[1]} vs "
            f"features {mixture_features.shape[1]}")
    return torch.einsum("bc,bchw->bhw", appearance, mixture_features).unsqueeze(1)


def threshold_mask(probs: torch.Tensor) -> torch.Tensor:
    """Binarize probabilities with a strict > 0.5 rule (0.5 itself maps to 0)."""
    return (probs > 0.5).to(probs.dtype)


def separate_appearance(appearance: np.ndarray, mixture_features: np.ndarray,
                        x_mix: MagGrid):
    """Functional appearance-stage separation on numpy inputs.

    Returns (mask logits [H, W], BinaryMask, masked MagGrid).
    """
    a = torch.from_numpy(np.asarray(appearance, dtype=np.float64)).unsqueeze(0)
    f = torch.from_numpy(np.asarray(mixture_features, dtype=np.float64)).unsqueeze(0)
    if f.shape[2:] != x_mix.values.shape:
        raise ValueError("mixture features do not match the grid shape")
    logits = fuse_appearance(a, f)[0, 0].numpy()
    mask_values = (1.0 / (1.0 + np.exp(-logits)) > 0.5).astype(np.float64)
    mask = BinaryMask.like(x_mix, mask_values)
    return logits, mask, apply_mask(mask, x_mix)
