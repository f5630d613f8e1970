"""Retinex decomposition: U-Net producing (illumination, reflectance), stage-1 losses.

The network maps an RGB image to a 1-channel illumination map and a
3-channel reflectance map, both sigmoid-bounded; recomposition is their
elementwise product with the illumination broadcast across channels.

All single-bar norms here are mean absolute error with a quadratic bowl
inside |x| < 1e-6 (continuous derivative for gradient checks, exact zero and
exact |x| everywhere that matters numerically).
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatchError
from .imaging import clamp01, validate_image
from .utils import crop_to, image_to_tensor, pad_to_multiple, tensor_to_image

SMOOTH_DELTA = 1e-6


@dataclass
class RetinexPair:
    """Illumination (HxWx1) and reflectance (HxWx3), both in [0, 1]."""

    illumination: np.ndarray
    reflectance: np.ndarray

    def __post_init__(self):
        validate_image(self.illumination, channels=1, name="illumination")
        validate_image(self.reflectance, channels=3, name="reflectance")
        if self.illumination.shape[:2] != self.reflectance.shape[:2]:
            raise ShapeMismatchError(
                f"illumination {self.illumination.shape[:2]} vs reflectance {self.reflectance.shape[:2]}"
            )


@dataclass(frozen=True)
class DecompNetConfig:
    base_channels: int = 32
    depth: int = 4
    crop: int = 256


@dataclass(frozen=True)
class DecompLossWeights:
    lambda_dd: float = 1.0
    lambda_nn: float = 1.0
    lambda_nd: float = 0.01
    lambda_dn: float = 0.001
    lambda_s: float = 10.0


class _DoubleConv(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class DecompositionUNet(nn.Module):
    """U-Net with concatenation skips; sigmoid heads split into R (3ch) and I (1ch)."""

    def __init__(self, config: DecompNetConfig = DecompNetConfig()):
        super().__init__()
        self.config = config
        c = config.base_channels
        chans = [c * 2**k for k in range(config.depth + 1)]  # e.g. 32,64,128,256,512
        self.inc = _DoubleConv(3, chans[0])
        self.downs = nn.ModuleList(
            _DoubleConv(chans[k], chans[k + 1]) for k in range(config.depth)
        )
        self.pool = nn.MaxPool2d(2)
        self.up_convs = nn.ModuleList(
            nn.Conv2d(chans[k + 1], chans[k], 1) for k in reversed(range(config.depth))
        )
        self.up_blocks = nn.ModuleList(
            _DoubleConv(2 * chans[k], chans[k]) for k in reversed(range(config.depth))
        )
        self.head = nn.Conv2d(chans[0], 4, 3, padding=1)

    def forward(self, x):
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(self.pool(skips[-1])))
        y = skips.pop()
        for up_conv, up_block in zip(self.up_convs, self.up_blocks):
            y = F.interpolate(y, scale_factor=2, mode="bilinear", align_corners=False)
            y = up_conv(y)
            y = up_block(torch.cat([skips.pop(), y], dim=1))
        out = torch.sigmoid(self.head(y))
        return out[:, 0:3], out[:, 3:4]

    @property
    def pad_multiple(self):
        return 2**self.config.depth


def decompose(img, net):
    """Run the decomposition net on one HxWx3 image; pads/crops to the net's stride."""
    validate_image(img, channels=3)
    dtype = next(net.parameters()).dtype
    t = image_to_tensor(img, dtype)
    t, size = pad_to_multiple(t, net.pad_multiple)
    was_training = net.training
    net.eval()
    with torch.no_grad():
        refl, illum = net(t)
    if was_training:
        net.train()
    return RetinexPair(
        illumination=tensor_to_image(crop_to(illum, size)),
        reflectance=tensor_to_image(crop_to(refl, size)),
    )


def recompose(pair):
    """S = I o R with the illumination broadcast over the reflectance channels."""
    if pair.illumination.shape[:2] != pair.reflectance.shape[:2]:
        raise ShapeMismatchError("illumination/reflectance spatial shapes differ")
    return clamp01(pair.illumination * pair.reflectance)


def recompose_t(illum, refl):
    """Tensor recomposition (B,1,H,W) x (B,3,H,W)."""
    return illum * refl


def smooth_abs(x, delta=SMOOTH_DELTA):
    """|x|, quadratic (x^2 / 2*delta) inside |x| < delta so the derivative is continuous."""
    ax = x.abs()
    return torch.where(ax < delta, x * x / (2.0 * delta), ax)


def _mean_abs(x):
    return smooth_abs(x).mean()


def forward_gradients(x):
    """Forward differences along width and height, replicate-padded at the far edge."""
    dx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return dx, dy


def loss_decom(r_n, i_n, r_d, i_d, s_n, s_d, w: DecompLossWeights = DecompLossWeights()):
    """Cross-reconstruction loss: every (reflectance, illumination) combination
    must rebuild the image the illumination came from."""
    return (
        w.lambda_dd * _mean_abs(r_d * i_d - s_d)
        + w.lambda_nn * _mean_abs(r_n * i_n - s_n)
        + w.lambda_nd * _mean_abs(r_n * i_d - s_d)
        + w.lambda_dn * _mean_abs(r_d * i_n - s_n)
    )


def loss_reflectance_similarity(r_n, r_d):
    return _mean_abs(r_n - r_d)


def loss_illumination_smoothness(pairs, lambda_s=10.0):
    """Structure-aware total variation of illumination.

    For each (illumination, reflectance) pair, the illumination gradient is
    penalized with weight exp(-lambda_s * |grad reflectance|); reflectance
    gradients are channel-averaged so steep edges relax the penalty locally.
    Direction terms are summed, each averaged over all pixels.
    """
    total = None
    for illum, refl in pairs:
        ix, iy = forward_gradients(illum)
        rx, ry = forward_gradients(refl)
        rx = smooth_abs(rx).mean(dim=-3, keepdim=True)
        ry = smooth_abs(ry).mean(dim=-3, keepdim=True)
        term = (smooth_abs(ix) * torch.exp(-lambda_s * rx)).mean() + (
            smooth_abs(iy) * torch.exp(-lambda_s * ry)
        ).mean()
        total = term if total is None else total + term
    return total


def stage1_loss(r_n, i_n, r_d, i_d, s_n, s_d, w: DecompLossWeights = DecompLossWeights()):
    """Stage-1 objective: cross-reconstruction + reflectance similarity + smoothness."""
    decom = loss_decom(r_n, i_n, r_d, i_d, s_n, s_d, w)
    rs = loss_reflectance_similarity(r_n, r_d)
    smooth = loss_illumination_smoothness([(i_n, r_n), (i_d, r_d)], w.lambda_s)
    return decom + rs + smooth, {"decom": decom, "rs": rs, "is": smooth}
