"""Illumination enhancement: full-resolution residual CNN.

Consumes the nighttime illumination map together with the reflectance (so
brightening can key off color/texture context) as a 4-channel stack and emits
a brightened 1-channel illumination map through a sigmoid head. No pooling:
illumination needs full-resolution structure.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeMismatchError
from .imaging import validate_image
from .utils import image_to_tensor, tensor_to_image


@dataclass(frozen=True)
class EnhanceNetConfig:
    num_layers: int = 11
    hidden_channels: int = 32
    kernel: int = 3

    def __post_init__(self):
        if self.num_layers < 3:
            raise ValueError("need at least input projection, one residual layer and a head")


class IlluminationEnhancer(nn.Module):
    """num_layers convolutions total: input projection, additive-skip middle
    layers (one skip per consecutive same-shape layer), sigmoid head."""

    def __init__(self, config: EnhanceNetConfig = EnhanceNetConfig()):
        super().__init__()
        self.config = config
        k = config.kernel
        pad = k // 2
        c = config.hidden_channels
        self.proj = nn.Conv2d(4, c, k, padding=pad)
        self.middle = nn.ModuleList(
            nn.Conv2d(c, c, k, padding=pad) for _ in range(config.num_layers - 2)
        )
        self.head = nn.Conv2d(c, 1, k, padding=pad)

    def input_projection(self, x):
        return torch.relu(self.proj(x))

    def features(self, x):
        y = self.input_projection(x)
        for conv in self.middle:
            y = torch.relu(conv(y)) + y
        return y

    def forward(self, illum, refl):
        if illum.shape[-2:] != refl.shape[-2:]:
            raise ShapeMismatchError(
                f"illumination {tuple(illum.shape[-2:])} vs reflectance {tuple(refl.shape[-2:])}"
            )
        x = torch.cat([illum, refl], dim=-3)
        return torch.sigmoid(self.head(self.features(x)))


def enhance_illumination(illum, refl, net):
    """numpy front end: (HxWx1, HxWx3) -> brightened HxWx1."""
    validate_image(illum, channels=1, name="illumination")
    validate_image(refl, channels=3, name="reflectance")
    dtype = next(net.parameters()).dtype
    was_training = net.training
    net.eval()
    with torch.no_grad():
        out = net(image_to_tensor(illum, dtype), image_to_tensor(refl, dtype))
    if was_training:
        net.train()
    return tensor_to_image(out)
