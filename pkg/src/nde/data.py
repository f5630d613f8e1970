"""Manifest construction, scene-level splitting, paired sampling, corpus synthesis.

Source layout on disk:
    <root>/clear/<scene_id>.png
    <root>/hazy/<scene_id>_<A>_<beta>.png
    <root>/depth/<scene_id>.png          (only needed when synthesizing haze)

Manifest JSON schema:
    {version, seed, scenes: [{scene_id, clear, variants: [{path, A, beta}], split}]}
with paths relative to the manifest's directory.
"""

import json
import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import imaging
from .errors import ConfigurationError, ManifestError, ShapeMismatchError, SplitError
from .haze import HazeParams, NightParams, darken_night, synthesize_haze

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
_IMAGE_EXTS = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class SceneVariant:
    path: str
    A: float
    beta: float


@dataclass
class SceneRecord:
    scene_id: str
    clear_path: str
    hazy_variants: list[SceneVariant] = field(default_factory=list)
    split: str | None = None


@dataclass
class Manifest:
    root: str
    records: list[SceneRecord] = field(default_factory=list)
    seed: int | None = None
    version: int = MANIFEST_VERSION

    def scenes(self, partition=None):
        if partition is None:
            return list(self.records)
        return [r for r in self.records if r.split == partition]

    def variant_count(self, partition=None):
        return sum(len(r.hazy_variants) for r in self.scenes(partition))


def _list_images(directory):
    if not os.path.isdir(directory):
        return []
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(_IMAGE_EXTS))


def _parse_variant_name(filename):
    stem = os.path.splitext(filename)[0]
    parts = stem.rsplit("_", 2)
    if len(parts) != 3:
        return None
    scene_id, a_str, beta_str = parts
    try:
        return scene_id, float(a_str), float(beta_str)
    except ValueError:
        return None


def format_variant_name(scene_id, A, beta, ext=".png"):
    return f"{scene_id}_{A:g}_{beta:g}{ext}"


def build_manifest(source_root, A=1.0, betas=(0.08, 0.16)):
    """Scan a corpus directory, keeping only variants matching the (A, betas) filter."""
    clear_files = _list_images(os.path.join(source_root, "clear"))
    seen = {}
    for f in clear_files:
        stem = os.path.splitext(f)[0]
        if stem in seen:
            raise ManifestError(f"duplicate scene_id {stem!r}: {seen[stem]} and {f}")
        seen[stem] = f

    by_scene = {}
    for f in _list_images(os.path.join(source_root, "hazy")):
        parsed = _parse_variant_name(f)
        if parsed is None:
            logger.debug("skipping unparseable hazy file name %s", f)
            continue
        scene_id, a_val, beta_val = parsed
        if abs(a_val - A) > 1e-9:
            continue
        if not any(abs(beta_val - b) <= 1e-9 for b in betas):
            continue
        by_scene.setdefault(scene_id, []).append(
            SceneVariant(path=os.path.join("hazy", f), A=a_val, beta=beta_val)
        )

    records = []
    for stem in sorted(seen):
        variants = sorted(by_scene.get(stem, []), key=lambda v: (v.beta, v.path))
        if not variants:
            warnings.warn(f"scene {stem!r} has no hazy variant matching the filter; excluded")
            continue
        records.append(
            SceneRecord(scene_id=stem, clear_path=os.path.join("clear", seen[stem]), hazy_variants=variants)
        )
    return Manifest(root=str(source_root), records=records)


def save_manifest(manifest, path):
    doc = {
        "version": manifest.version,
        "seed": manifest.seed,
        "scenes": [
            {
                "scene_id": r.scene_id,
                "clear": r.clear_path,
                "variants": [{"path": v.path, "A": v.A, "beta": v.beta} for v in r.hazy_variants],
                "split": r.split,
            }
            for r in manifest.records
        ],
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_manifest(path, root=None):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {doc.get('version')!r}")
    records = [
        SceneRecord(
            scene_id=s["scene_id"],
            clear_path=s["clear"],
            hazy_variants=[SceneVariant(v["path"], float(v["A"]), float(v["beta"])) for v in s["variants"]],
            split=s.get("split"),
        )
        for s in doc["scenes"]
    ]
    return Manifest(
        root=str(root) if root is not None else os.path.dirname(os.path.abspath(path)),
        records=records,
        seed=doc.get("seed"),
    )


def split_scenes(manifest, ratio=(3, 1), seed=0):
    """Assign scenes to train/test, test count rounded down (toward train), >= 1 each."""
    if ratio[0] <= 0 or ratio[1] <= 0:
        raise SplitError(f"ratio parts must be positive, got {ratio}")
    n = len(manifest.records)
    if n < 2:
        raise SplitError(f"need at least 2 scenes to split, got {n}")
    n_test = max(1, (n * ratio[1]) // (ratio[0] + ratio[1]))
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    test_idx = set(order[:n_test].tolist())
    records = []
    for i, rec in enumerate(sorted(manifest.records, key=lambda r: r.scene_id)):
        records.append(
            SceneRecord(
                scene_id=rec.scene_id,
                clear_path=rec.clear_path,
                hazy_variants=list(rec.hazy_variants),
                split="test" if i in test_idx else "train",
            )
        )
    return Manifest(root=manifest.root, records=records, seed=seed, version=manifest.version)


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    scale_range: tuple = (0.8, 1.2)
    crop: int = 256


@dataclass
class TrainingPair:
    night_hazy: np.ndarray
    clear: np.ndarray
    scene_id: str
    beta: float


def iter_pairs(manifest, partition):
    """Deterministically ordered (record, variant) pairs of a partition."""
    for rec in sorted(manifest.scenes(partition), key=lambda r: r.scene_id):
        for var in rec.hazy_variants:
            yield rec, var


def load_pair(manifest, record, variant):
    hazy = imaging.load_image(os.path.join(manifest.root, variant.path))
    clear = imaging.load_image(os.path.join(manifest.root, record.clear_path))
    if hazy.shape[:2] != clear.shape[:2]:
        raise ShapeMismatchError(
            f"scene {record.scene_id}: hazy {hazy.shape[:2]} vs clear {clear.shape[:2]}"
        )
    return TrainingPair(night_hazy=hazy, clear=clear, scene_id=record.scene_id, beta=variant.beta)


def _paired_transform(pair, aug, rng):
    h, w = pair.clear.shape[:2]
    crop = aug.crop
    if aug.enabled:
        scale = rng.uniform(aug.scale_range[0], aug.scale_range[1])
        th = max(crop, int(round(h * scale)))
        tw = max(crop, int(round(w * scale)))
        top = int(rng.integers(0, th - crop + 1))
        left = int(rng.integers(0, tw - crop + 1))
    else:
        # deterministic fallback: scale the short side up to the crop, center crop
        scale = max(crop / h, crop / w, 1.0)
        th = max(crop, int(round(h * scale)))
        tw = max(crop, int(round(w * scale)))
        top = (th - crop) // 2
        left = (tw - crop) // 2

    def apply(img):
        if (th, tw) != (h, w):
            img = imaging.resize(img, th, tw)
        return imaging.crop(img, top, left, crop, crop)

    return TrainingPair(
        night_hazy=apply(pair.night_hazy),
        clear=apply(pair.clear),
        scene_id=pair.scene_id,
        beta=pair.beta,
    )


def sample_batch(manifest, partition, batch_size, aug=AugmentConfig(), rng=None):
    """Draw training pairs; the same geometric transform hits both images of a pair."""
    pairs = list(iter_pairs(manifest, partition))
    if not pairs:
        raise ConfigurationError(f"partition {partition!r} is empty")
    if rng is None:
        rng = np.random.default_rng()
    picks = rng.integers(0, len(pairs), size=batch_size)
    batch = []
    for idx in picks:
        rec, var = pairs[int(idx)]
        batch.append(_paired_transform(load_pair(manifest, rec, var), aug, rng))
    return batch


def synthesize_corpus(
    source_root,
    out_root,
    A=1.0,
    betas=(0.08, 0.16),
    night=NightParams(),
    depth_max=20.0,
):
    """Build the nighttime-hazed corpus under `out_root` and return its manifest.

    Two source layouts are accepted: clear/ + depth/ (haze synthesized via the
    scattering model, then darkened) or clear/ + hazy/ (existing hazy variants
    matching the filter are darkened as-is).
    """
    clear_dir = os.path.join(source_root, "clear")
    depth_dir = os.path.join(source_root, "depth")
    hazy_dir = os.path.join(source_root, "hazy")
    clear_files = _list_images(clear_dir)
    if not clear_files:
        raise ConfigurationError(f"no clear images under {clear_dir}")
    from_depth = os.path.isdir(depth_dir)
    if not from_depth and not os.path.isdir(hazy_dir):
        raise ConfigurationError(f"{source_root} has neither depth/ nor hazy/ to build from")

    existing = {}
    if not from_depth:
        for f in _list_images(hazy_dir):
            parsed = _parse_variant_name(f)
            if parsed:
                existing.setdefault(parsed[0], []).append((f, parsed[1], parsed[2]))

    count = 0
    for f in clear_files:
        scene_id = os.path.splitext(f)[0]
        clear = imaging.load_image(os.path.join(clear_dir, f))
        imaging.save_image(clear, os.path.join(out_root, "clear", scene_id + ".png"))
        if from_depth:
            depth_path = os.path.join(depth_dir, scene_id + ".png")
            if not os.path.exists(depth_path):
                warnings.warn(f"scene {scene_id!r} has no depth map; skipped")
                continue
            depth = imaging.load_image(depth_path)
            for beta in betas:
                hazy = synthesize_haze(clear, HazeParams(A=A, beta=beta), depth=depth, depth_max=depth_max)
                night_img = darken_night(hazy, night)
                name = format_variant_name(scene_id, A, beta)
                imaging.save_image(night_img, os.path.join(out_root, "hazy", name))
                count += 1
        else:
            for fname, a_val, beta_val in existing.get(scene_id, []):
                if abs(a_val - A) > 1e-9 or not any(abs(beta_val - b) <= 1e-9 for b in betas):
                    continue
                hazy = imaging.load_image(os.path.join(hazy_dir, fname))
                night_img = darken_night(hazy, night)
                name = format_variant_name(scene_id, a_val, beta_val)
                imaging.save_image(night_img, os.path.join(out_root, "hazy", name))
                count += 1

    logger.info("synthesized %d nighttime hazy images under %s", count, out_root)
    return build_manifest(out_root, A=A, betas=betas)
