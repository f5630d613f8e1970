"""From-scratch SSIM/PSNR, corpus evaluation, cascade baselines, comparison grids.

SSIM follows the standard single-scale definition: 11x11 Gaussian window with
sigma 1.5, K1=0.01, K2=0.03, computed per channel on valid window positions
and averaged. PSNR is 10*log10(MAX^2/MSE) with an `inf` sentinel for
identical images (excluded from corpus means with a warning).
"""

import csv
import json
import logging
import os
import subprocess
import tempfile
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image as PILImage
from PIL import ImageDraw

from . import imaging
from .data import iter_pairs, load_pair
from .errors import AdapterError, BoundsError, LayoutError, ShapeMismatchError

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b, max_val=1.0):
    """Peak signal-to-noise ratio in dB; inf when the images are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(max_val**2 / mse))


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter_valid(plane, kernel):
    # separable valid-mode correlation: rows then columns
    out = sliding_window_view(plane, len(kernel), axis=1) @ kernel
    return sliding_window_view(out, len(kernel), axis=0) @ kernel


def ssim(a, b, max_val=1.0, window=SSIM_WINDOW, sigma=SSIM_SIGMA, k1=SSIM_K1, k2=SSIM_K2):
    """Structural similarity in [-1, 1], per-channel maps averaged together."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    h, w = a.shape[:2]
    if h < window or w < window:
        raise BoundsError(f"image {h}x{w} smaller than the {window}x{window} SSIM window")
    kernel = _gaussian_kernel(window, sigma)
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2
    channel_means = []
    for c in range(a.shape[2]):
        x = a[:, :, c]
        y = b[:, :, c]
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        var_x = _filter_valid(x * x, kernel) - mu_x**2
        var_y = _filter_valid(y * y, kernel) - mu_y**2
        cov = _filter_valid(x * y, kernel) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        channel_means.append(np.mean(num / den))
    return float(np.mean(channel_means))


@dataclass
class CascadeStage:
    """One image-to-image step: either an in-process callable or an external command.

    External adapters follow the protocol `cmd <in_path> <out_path>`, exit 0
    on success.
    """

    name: str
    fn: object = None
    command: list = None

    def apply(self, img, workdir=None):
        if self.fn is not None:
            return self.fn(img)
        if not self.command:
            raise AdapterError(f"stage {self.name!r} has neither a callable nor a command")
        with tempfile.TemporaryDirectory(dir=workdir) as tmp:
            in_path = os.path.join(tmp, "in.png")
            out_path = os.path.join(tmp, "out.png")
            imaging.save_image(img, in_path)
            proc = subprocess.run(
                list(self.command) + [in_path, out_path],
                capture_output=True,
                text=True,
            )
            if proc.returncode != 0:
                raise AdapterError(
                    f"adapter {self.name!r} exited {proc.returncode}: {proc.stderr.strip()[:500]}"
                )
            if not os.path.exists(out_path):
                raise AdapterError(f"adapter {self.name!r} wrote no output image")
            return imaging.load_image(out_path)


@dataclass
class CascadeSpec:
    stages: list

    def __post_init__(self):
        if not self.stages:
            raise LayoutError("a cascade needs at least one stage")


def identity_cascade():
    return CascadeSpec([CascadeStage(name="identity", fn=lambda img: img)])


def run_cascade(spec, img, workdir=None, intermediates=None):
    """Apply stages left-to-right; `intermediates`, when a list, collects copies."""
    out = img
    for i, stage in enumerate(spec.stages):
        try:
            out = stage.apply(out, workdir=workdir)
        except AdapterError:
            raise
        except Exception as exc:
            raise AdapterError(f"stage {i} ({stage.name!r}) failed: {exc}") from exc
        if intermediates is not None:
            intermediates.append((stage.name, out))
    return out


@dataclass
class ImageResult:
    image_id: str
    ssim: float = float("nan")
    psnr: float = float("nan")
    timings_ms: list = field(default_factory=list)
    error: str = None


@dataclass
class MetricsRecord:
    per_image: list
    mean_ssim: float
    mean_psnr: float
    count: int
    error_count: int


def _as_process(model_or_cascade):
    if isinstance(model_or_cascade, CascadeSpec):
        return lambda img: run_cascade(model_or_cascade, img)
    if callable(model_or_cascade):
        return model_or_cascade
    raise AdapterError(f"cannot evaluate object of type {type(model_or_cascade).__name__}")


def evaluate(model_or_cascade, manifest, partition="test", out_dir=None):
    """Run the model/cascade over a partition and score against clear ground truth."""
    process = _as_process(model_or_cascade)
    results = []
    for rec, var in iter_pairs(manifest, partition):
        image_id = os.path.splitext(os.path.basename(var.path))[0]
        res = ImageResult(image_id=image_id)
        try:
            pair = load_pair(manifest, rec, var)
            t0 = time.perf_counter()
            out = process(pair.night_hazy)
            res.timings_ms = [round((time.perf_counter() - t0) * 1000.0, 3)]
            res.ssim = ssim(out, pair.clear)
            res.psnr = psnr(out, pair.clear)
        except Exception as exc:
            res.error = f"{type(exc).__name__}: {exc}"
            logger.warning("evaluation failed for %s: %s", image_id, res.error)
        results.append(res)

    ok = [r for r in results if r.error is None]
    ssims = [r.ssim for r in ok]
    psnrs = [r.psnr for r in ok if np.isfinite(r.psnr)]
    if len(psnrs) < len(ok):
        warnings.warn("infinite PSNR values excluded from the corpus mean")
    record = MetricsRecord(
        per_image=results,
        mean_ssim=float(np.mean(ssims)) if ssims else float("nan"),
        mean_psnr=float(np.mean(psnrs)) if psnrs else float("inf"),
        count=len(ok),
        error_count=len(results) - len(ok),
    )
    if out_dir is not None:
        write_metrics(record, out_dir)
    return record


def write_metrics(record, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "ssim", "psnr", "stage_timings_ms", "error"])
        for r in record.per_image:
            writer.writerow(
                [r.image_id, f"{r.ssim:.6f}", f"{r.psnr:.4f}", ";".join(map(str, r.timings_ms)), r.error or ""]
            )
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(
            {
                "mean_ssim": record.mean_ssim,
                "mean_psnr": record.mean_psnr,
                "count": record.count,
                "error_count": record.error_count,
            },
            fh,
            indent=1,
        )


LABEL_STRIP_HEIGHT = 20


def emit_comparison_grid(rows, path=None, label_height=LABEL_STRIP_HEIGHT):
    """Stack labeled image rows into one raster with a single top label strip.

    Every image must share one HxW size and the rows must have equal length;
    returns the grid as an image and writes it to `path` when given.
    """
    if not rows:
        raise LayoutError("no rows to lay out")
    n_cols = len(rows[0][1])
    if n_cols == 0 or any(len(imgs) != n_cols for _, imgs in rows):
        raise LayoutError("ragged rows: every row needs the same positive image count")
    first = rows[0][1][0]
    h, w = first.shape[:2]
    for _, imgs in rows:
        for im in imgs:
            if im.shape[:2] != (h, w):
                raise LayoutError(f"image size {im.shape[:2]} differs from {(h, w)}")

    grid = np.ones((label_height + len(rows) * h, n_cols * w, 3))
    for ri, (_, imgs) in enumerate(rows):
        for ci, im in enumerate(imgs):
            if im.shape[2] == 1:
                im = np.repeat(im, 3, axis=2)
            grid[label_height + ri * h : label_height + (ri + 1) * h, ci * w : (ci + 1) * w] = im

    strip = PILImage.new("RGB", (n_cols * w, label_height), (255, 255, 255))
    draw = ImageDraw.Draw(strip)
    legend = "  ".join(f"{i + 1}:{label}" for i, (label, _) in enumerate(rows))
    draw.text((2, 2), legend[: max(1, n_cols * w // 6)], fill=(0, 0, 0))
    grid[:label_height] = np.asarray(strip, dtype=np.float64) / 255.0

    grid = imaging.clamp01(grid)
    if path is not None:
        imaging.save_image(grid, path)
    return grid
