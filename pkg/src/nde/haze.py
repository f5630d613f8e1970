"""Atmospheric-scattering haze synthesis, its analytic inverse, and nighttime darkening.

Forward model: hazy = clear * t + A * (1 - t), with per-pixel transmission
t = exp(-beta * depth) when only a depth map is supplied. The inverse
(clear = (hazy - A*(1-t)) / t) is exact before clamping as long as t stays
above the floor.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError
from .imaging import clamp01, gamma_correct, hsv_to_rgb, rgb_to_hsv, validate_image

# transmission floor: the inverse divides by t, so distant pixels must not blow up
T_FLOOR = 1e-3


@dataclass(frozen=True)
class HazeParams:
    """Global atmospheric light A, scattering coefficient beta, optional t map."""

    A: float = 1.0
    beta: float = 0.0
    transmission: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.A <= 1.0:
            raise DomainError(f"atmospheric light A must be in [0,1], got {self.A}")
        if self.beta < 0:
            raise DomainError(f"scattering coefficient beta must be >= 0, got {self.beta}")
        if self.transmission is not None:
            t = self.transmission
            if np.any(t <= 0) or np.any(t > 1):
                raise DomainError("transmission values must lie in (0, 1]")


@dataclass(frozen=True)
class NightParams:
    """V-channel multiplier and darkening gamma for the nighttime transform."""

    v_scale: float = 0.5
    gamma_dark: float = 2.5

    def __post_init__(self):
        if not 0.0 < self.v_scale <= 1.0:
            raise DomainError(f"v_scale must be in (0,1], got {self.v_scale}")
        if self.gamma_dark < 1.0:
            raise DomainError(f"gamma_dark must be >= 1, got {self.gamma_dark}")


def transmission_from_depth(depth, beta, depth_max=1.0):
    """t = exp(-beta * depth * depth_max), floored at T_FLOOR.

    `depth` is a single-channel map normalized to [0,1]; `depth_max` rescales
    it to scene units before the exponential.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3:
        depth = depth[..., 0]
    if np.any(depth < 0):
        raise DomainError("depth map must be non-negative")
    t = np.exp(-float(beta) * depth * float(depth_max))
    return np.clip(t, T_FLOOR, 1.0)


def _resolve_transmission(img, params, depth=None, depth_max=1.0):
    if params.transmission is not None:
        t = np.asarray(params.transmission, dtype=np.float64)
    elif depth is not None:
        t = transmission_from_depth(depth, params.beta, depth_max)
    else:
        raise ConfigurationError("need either a transmission map or a depth map")
    if t.ndim == 3:
        t = t[..., 0]
    if t.shape != img.shape[:2]:
        raise ConfigurationError(
            f"transmission shape {t.shape} does not match image {img.shape[:2]}"
        )
    return np.clip(t, T_FLOOR, 1.0)[..., None]


def synthesize_haze(clear, params, depth=None, depth_max=1.0):
    """Apply the scattering model: pixelwise convex blend of the scene and A."""
    validate_image(clear, name="clear")
    t = _resolve_transmission(clear, params, depth, depth_max)
    hazy = np.asarray(clear, dtype=np.float64) * t + params.A * (1.0 - t)
    return clamp01(hazy)


def dehaze_oracle(hazy, params, depth=None, depth_max=1.0):
    """Exact inversion of synthesize_haze (then clamped to [0,1])."""
    validate_image(hazy, name="hazy")
    t = _resolve_transmission(hazy, params, depth, depth_max)
    clear = (np.asarray(hazy, dtype=np.float64) - params.A * (1.0 - t)) / t
    return clamp01(clear)


def darken_night(img, params=NightParams()):
    """HSV V-channel scaling followed by gamma darkening.

    The V step leaves hue and saturation untouched; the gamma step is the
    global power curve from the imaging core.
    """
    validate_image(img, channels=3)
    hsv = rgb_to_hsv(img)
    hsv[..., 2] *= params.v_scale
    dark = hsv_to_rgb(hsv)
    return gamma_correct(dark, params.gamma_dark)
