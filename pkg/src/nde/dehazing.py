"""Reflectance dehazing: densely connected encoder, bottleneck decoder, pyramid pooling.

Encoder mirrors the first three dense blocks of the 121-layer densely
connected classifier (growth 32, block sizes 6/12/24, stride-2 stem + three
transitions, /32 overall). The decoder alternates residual bottleneck pairs
(BatchNorm-Conv-ReLU-Dropout mini-blocks) with transition-up stages that
halve channels and double resolution until the input size is restored, then
fuses multi-scale context through fractional average pooling branches.

The sigmoid head adds the input's logit back in (near-identity at init) so
short training runs refine the input instead of rebuilding it from noise.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .imaging import validate_image
from .utils import crop_to, image_to_tensor, pad_to_multiple, tensor_to_image


@dataclass(frozen=True)
class DehazeNetConfig:
    block_layers: tuple = (6, 12, 24)
    growth_rate: int = 32
    init_channels: int = 64
    bn_size: int = 4
    pooling_fractions: tuple = (1 / 32, 1 / 16, 1 / 8, 1 / 4)
    pyramid_branch_channels: int = 1
    dropout_rate: float = 0.0

    def __post_init__(self):
        if len(self.block_layers) != 3:
            raise ValueError("encoder uses exactly 3 dense blocks")
        if len(self.pooling_fractions) != 4:
            raise ValueError("pyramid pooling uses exactly 4 fractions")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


def dense_layer_input_channels(initial, layer_index, growth_rate):
    """Input width of layer k (1-based) inside a dense block: initial + (k-1)*growth."""
    return initial + (layer_index - 1) * growth_rate


def encoder_channel_schedule(config: DehazeNetConfig):
    """Channel count entering/leaving each dense block and transition."""
    schedule = []
    c = config.init_channels
    for n_layers in config.block_layers:
        block_out = c + n_layers * config.growth_rate
        schedule.append({"block_in": c, "block_out": block_out, "transition_out": block_out // 2})
        c = block_out // 2
    return schedule


def pyramid_output_channels(trunk_channels, config: DehazeNetConfig):
    return trunk_channels + len(config.pooling_fractions) * config.pyramid_branch_channels


def pooled_size(extent, fraction):
    """Pyramid branch grid size: the fraction of the spatial extent, at least 1."""
    return max(1, int(round(extent * fraction)))


class _DenseLayer(nn.Module):
    def __init__(self, c_in, growth, bn_size, drop):
        super().__init__()
        inter = bn_size * growth
        self.norm1 = nn.BatchNorm2d(c_in)
        self.conv1 = nn.Conv2d(c_in, inter, 1, bias=False)
        self.norm2 = nn.BatchNorm2d(inter)
        self.conv2 = nn.Conv2d(inter, growth, 3, padding=1, bias=False)
        self.drop = nn.Dropout2d(drop)

    def forward(self, x):
        y = self.conv1(F.relu(self.norm1(x)))
        y = self.conv2(F.relu(self.norm2(y)))
        return torch.cat([x, self.drop(y)], dim=1)


class _DenseBlock(nn.Module):
    def __init__(self, c_in, n_layers, growth, bn_size, drop):
        super().__init__()
        self.layers = nn.Sequential(
            *[_DenseLayer(c_in + k * growth, growth, bn_size, drop) for k in range(n_layers)]
        )

    def forward(self, x):
        return self.layers(x)


class _TransitionDown(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.norm = nn.BatchNorm2d(c_in)
        self.conv = nn.Conv2d(c_in, c_out, 1, bias=False)
        self.pool = nn.AvgPool2d(2)

    def forward(self, x):
        return self.pool(self.conv(F.relu(self.norm(x))))


class _MiniBlock(nn.Module):
    # BatchNorm -> Conv -> ReLU -> Dropout
    def __init__(self, channels, drop):
        super().__init__()
        self.norm = nn.BatchNorm2d(channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.drop = nn.Dropout2d(drop)

    def forward(self, x):
        return self.drop(F.relu(self.conv(self.norm(x))))


class _Bottleneck(nn.Module):
    """Two mini-blocks with a residual connection around the pair."""

    def __init__(self, channels, drop):
        super().__init__()
        self.block1 = _MiniBlock(channels, drop)
        self.block2 = _MiniBlock(channels, drop)

    def forward(self, x):
        return x + self.block2(self.block1(x))


class _TransitionUp(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        return F.interpolate(self.conv(x), scale_factor=2, mode="bilinear", align_corners=False)


class PyramidPooling(nn.Module):
    """Concatenate the trunk with branches pooled to fractions of the input size."""

    def __init__(self, trunk_channels, config: DehazeNetConfig):
        super().__init__()
        self.fractions = config.pooling_fractions
        self.branches = nn.ModuleList(
            nn.Conv2d(trunk_channels, config.pyramid_branch_channels, 1)
            for _ in self.fractions
        )
        self.out_channels = pyramid_output_channels(trunk_channels, config)

    def forward(self, x):
        h, w = x.shape[-2:]
        outs = [x]
        for frac, conv in zip(self.fractions, self.branches):
            pooled = F.adaptive_avg_pool2d(x, (pooled_size(h, frac), pooled_size(w, frac)))
            outs.append(F.interpolate(conv(pooled), size=(h, w), mode="bilinear", align_corners=False))
        return torch.cat(outs, dim=1)


class ReflectanceDehazer(nn.Module):
    PAD_MULTIPLE = 32

    def __init__(self, config: DehazeNetConfig = DehazeNetConfig()):
        super().__init__()
        self.config = config
        drop = config.dropout_rate
        g = config.growth_rate

        self.stem = nn.Sequential(
            nn.Conv2d(3, config.init_channels, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(config.init_channels),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        blocks = []
        c = config.init_channels
        for n_layers in config.block_layers:
            blocks.append(_DenseBlock(c, n_layers, g, config.bn_size, drop))
            c = c + n_layers * g
            blocks.append(_TransitionDown(c, c // 2))
            c = c // 2
        self.encoder = nn.Sequential(*blocks)
        self.bottom_channels = c  # 512 for the default config

        # decoder: bottleneck + transition-up per level, channels halving each time
        ups = []
        for _ in range(5):
            ups.append(_Bottleneck(c, drop))
            ups.append(_TransitionUp(c, c // 2))
            c = c // 2
        self.decoder = nn.Sequential(*ups)
        self.pyramid = PyramidPooling(c, config)
        self.head = nn.Conv2d(self.pyramid.out_channels, 3, 3, padding=1)
        # near-identity start: head contributes ~0, the input logit dominates
        nn.init.normal_(self.head.weight, std=1e-3)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        x, size = pad_to_multiple(x, self.PAD_MULTIPLE)
        y = self.stem(x)
        y = self.encoder(y)
        y = self.decoder(y)
        y = self.pyramid(y)
        logit_in = torch.logit(x.clamp(1e-4, 1.0 - 1e-4))
        out = torch.sigmoid(self.head(y) + logit_in)
        return crop_to(out, size)


def dehaze_reflectance(refl, net):
    """numpy front end: HxWx3 reflectance -> dehazed HxWx3."""
    validate_image(refl, channels=3, name="reflectance")
    dtype = next(net.parameters()).dtype
    was_training = net.training
    net.eval()
    with torch.no_grad():
        out = net(image_to_tensor(refl, dtype))
    if was_training:
        net.train()
    return tensor_to_image(out)
