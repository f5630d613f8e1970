"""Stage-2 objective: self-supervised MSE terms plus a feature-space edge-preserving loss.

The feature extractor is a fixed (never trained) convolutional pyramid laid
out like the classic 16-layer configuration: stages of 2/2/3/3 convolutions
with channel widths base*(1,2,4,8) and taps on the post-activation output of
each stage. Weights either come from an external checkpoint or are seeded
deterministically; random multi-scale features still give a usable
perceptual distance for desk-scale runs.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError

FEATURE_ARCHIVE_VERSION = 1


@dataclass(frozen=True)
class ReconLossWeights:
    lambda_image: float = 1.0
    lambda_illum: float = 0.01
    lambda_refl: float = 0.05
    lambda_feat: float = 1.0
    layer_weights: tuple = (8.0, 4.0, 2.0, 1.0)  # shallow -> deep

    def __post_init__(self):
        if len(self.layer_weights) != 4:
            raise ValueError("exactly 4 tap-layer weights expected")


_STAGE_CONVS = (2, 2, 3, 3)


class FeatureExtractor(nn.Module):
    """Frozen 4-stage conv pyramid; forward returns the 4 tap feature maps."""

    def __init__(self, base_channels=64, seed=0, dtype=torch.float32):
        super().__init__()
        self.base_channels = base_channels
        self.seed = seed
        stages = []
        c_in = 3
        for k, n_convs in enumerate(_STAGE_CONVS):
            c_out = base_channels * 2**k
            convs = []
            for _ in range(n_convs):
                convs.append(nn.Conv2d(c_in, c_out, 3, padding=1))
                convs.append(nn.ReLU(inplace=True))
                c_in = c_out
            stages.append(nn.Sequential(*convs))
        self.stages = nn.ModuleList(stages)
        self._seed_weights(seed)
        self.to(dtype)
        self.requires_grad_(False)
        self.eval()

    def _seed_weights(self, seed):
        rng = np.random.default_rng(seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                w = rng.normal(0.0, (2.0 / fan_in) ** 0.5, size=tuple(m.weight.shape))
                with torch.no_grad():
                    m.weight.copy_(torch.from_numpy(w))
                    m.bias.zero_()

    def train(self, mode=True):
        # frozen by contract: stay in eval mode no matter what the trainer does
        return super().train(False)

    def forward(self, x):
        taps = []
        for i, stage in enumerate(self.stages):
            if i > 0 and x.shape[-2] >= 2 and x.shape[-1] >= 2:
                x = F.max_pool2d(x, 2)
            x = stage(x)
            taps.append(x)
        return taps


def save_feature_extractor(extractor, path):
    torch.save(
        {
            "version": FEATURE_ARCHIVE_VERSION,
            "base_channels": extractor.base_channels,
            "seed": extractor.seed,
            "state_dict": extractor.state_dict(),
        },
        path,
    )


def load_feature_extractor(path, dtype=torch.float32):
    doc = torch.load(path, map_location="cpu", weights_only=True)
    if doc.get("version") != FEATURE_ARCHIVE_VERSION:
        raise CheckpointError(f"unsupported feature archive version {doc.get('version')!r}")
    ext = FeatureExtractor(base_channels=doc["base_channels"], seed=doc.get("seed", 0), dtype=dtype)
    ext.load_state_dict(doc["state_dict"])
    ext.requires_grad_(False)
    return ext


def loss_mse(s_y, s_d, i_y, i_d, r_y, r_d, w: ReconLossWeights = ReconLossWeights()):
    """Weighted mean-squared error over the image, illumination and reflectance pairs.

    The *_d inputs are targets from the frozen decomposition; callers detach
    them so no gradient reaches the decomposition weights.
    """
    return (
        w.lambda_image * (s_y - s_d).pow(2).mean()
        + w.lambda_illum * (i_y - i_d).pow(2).mean()
        + w.lambda_refl * (r_y - r_d).pow(2).mean()
    )


def loss_vgg(s_y, s_d, extractor, w: ReconLossWeights = ReconLossWeights()):
    """Edge-preserving loss: weighted squared feature distance at the 4 taps,
    each tap averaged over its own spatial/channel extent."""
    taps_y = extractor(s_y)
    taps_d = extractor(s_d)
    total = None
    for wi, fy, fd in zip(w.layer_weights, taps_y, taps_d):
        term = wi * (fy - fd).pow(2).mean()
        total = term if total is None else total + term
    return w.lambda_feat * total


def loss_reconstruction_total(s_y, s_d, i_y, i_d, r_y, r_d, extractor, w=ReconLossWeights()):
    return loss_vgg(s_y, s_d, extractor, w) + loss_mse(s_y, s_d, i_y, i_d, r_y, r_d, w)
