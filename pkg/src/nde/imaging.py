"""Image representation and core raster operations.

An image throughout this toolkit is a numpy float array of shape HxWxC
(C = 1 or 3) with values in [0, 1], channels last. Every public operation
returns values clamped back into [0, 1]. 8-bit files map to [0, 1] by /255
on load and round(x*255) on save; sRGB values are treated as linear.
"""

import os

import numpy as np
from PIL import Image as PILImage

from .errors import BoundsError, ChannelMismatchError, DomainError, ImageIOError

Image = np.ndarray


def validate_image(img, channels=None, name="image"):
    if not isinstance(img, np.ndarray):
        raise ChannelMismatchError(f"{name}: expected a numpy array, got {type(img).__name__}")
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ChannelMismatchError(f"{name}: expected HxWxC with C in {{1,3}}, got shape {img.shape}")
    if channels is not None and img.shape[2] != channels:
        raise ChannelMismatchError(f"{name}: expected {channels} channels, got {img.shape[2]}")
    if not np.all(np.isfinite(img)):
        raise DomainError(f"{name}: contains non-finite values")
    return img


def clamp01(img):
    return np.clip(img, 0.0, 1.0)


def rgb_to_hsv(img):
    """RGB -> HSV with hue scaled into [0, 1) (not degrees)."""
    validate_image(img, channels=3)
    img = np.asarray(img, dtype=np.float64)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    v = maxc
    delta = maxc - minc
    safe_max = np.where(maxc > 0, maxc, 1.0)
    s = np.where(maxc > 0, delta / safe_max, 0.0)
    safe_delta = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return clamp01(np.stack([h, np.clip(s, 0, 1), v], axis=-1))


def hsv_to_rgb(img):
    """HSV (H in [0,1), S, V in [0,1]) -> RGB. H == 1 wraps to 0."""
    validate_image(img, channels=3)
    img = np.asarray(img, dtype=np.float64)
    h, s, v = img[..., 0], img[..., 1], img[..., 2]
    eps = 1e-9
    if np.any(h < -eps) or np.any(h > 1.0 + eps):
        raise DomainError("hue out of [0, 1)")
    if np.any(s < -eps) or np.any(s > 1.0 + eps) or np.any(v < -eps) or np.any(v > 1.0 + eps):
        raise DomainError("saturation/value out of [0, 1]")
    h = np.clip(h, 0.0, 1.0)
    s = np.clip(s, 0.0, 1.0)
    v = np.clip(v, 0.0, 1.0)
    h6 = h * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    # sector k selects one of the six (r,g,b) permutations of (v,t,p,q)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return clamp01(np.stack([r, g, b], axis=-1))


def gamma_correct(img, gamma):
    """Elementwise power curve out = in**gamma; gamma must be > 0."""
    validate_image(img)
    if not np.isfinite(gamma) or gamma <= 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    return clamp01(np.power(np.clip(img, 0.0, 1.0), float(gamma)))


def crop(img, top, left, height, width):
    validate_image(img)
    h, w = img.shape[:2]
    if height <= 0 or width <= 0:
        raise BoundsError(f"crop size must be positive, got {height}x{width}")
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise BoundsError(
            f"crop window ({top},{left},{height},{width}) outside image bounds {h}x{w}"
        )
    return img[top : top + height, left : left + width].copy()


def center_crop(img, height, width):
    h, w = img.shape[:2]
    return crop(img, (h - height) // 2, (w - width) // 2, height, width)


def _sample_coords(n_in, n_out):
    # corner-aligned sampling: output corners map exactly onto input corners
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.linspace(0.0, n_in - 1.0, n_out)


def _resize_axis(img, n_out, axis):
    n_in = img.shape[axis]
    if n_in == n_out:
        return img
    pos = _sample_coords(n_in, n_out)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    shape = [1, 1, 1]
    shape[axis] = n_out
    frac = frac.reshape(shape)
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    return a * (1.0 - frac) + b * frac


def resize(img, height, width):
    """Bilinear resize with corner-aligned sampling."""
    validate_image(img)
    if height < 1 or width < 1:
        raise BoundsError(f"resize target must be at least 1x1, got {height}x{width}")
    out = np.asarray(img, dtype=np.float64)
    out = _resize_axis(out, int(height), axis=0)
    out = _resize_axis(out, int(width), axis=1)
    return clamp01(out)


def load_image(path):
    """Read a PNG/JPEG file into an HxWxC float64 array in [0, 1]."""
    try:
        with PILImage.open(path) as im:
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.float64)[:, :, None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def save_image(img, path):
    """Quantize to 8 bits (round(x*255)) and write PNG/JPEG by extension."""
    validate_image(img)
    data = np.rint(clamp01(img) * 255.0).astype(np.uint8)
    if data.shape[2] == 1:
        pil = PILImage.fromarray(data[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(data, mode="RGB")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    try:
        pil.save(path)
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc
