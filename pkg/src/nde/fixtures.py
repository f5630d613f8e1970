"""Deterministic procedural fixture corpus: tiny outdoor-style scenes with depth maps.

Used by the desk-scale preset and the test suite so nothing has to be
downloaded. Each scene is a seeded composition of sky gradient, sun disc,
textured ground plane and a few box structures; the depth map is 1.0 at the
sky and falls toward the bottom of the frame.
"""

import os

import numpy as np

from .imaging import clamp01, resize, save_image


def _value_noise(rng, h, w, cells=8, amp=1.0):
    gh = max(2, h // cells)
    gw = max(2, w // cells)
    grid = rng.random((gh, gw, 1))
    return resize(grid, h, w) * amp


def _render_scene(rng, h, w):
    img = np.zeros((h, w, 3))
    depth = np.zeros((h, w, 1))

    horizon = int(h * rng.uniform(0.35, 0.55))
    rows = np.arange(h)[:, None, None]

    # sky: vertical gradient between two related colors, far depth
    top = rng.uniform(0.45, 0.85, size=3)
    bottom = top * rng.uniform(0.55, 0.95)
    frac = np.clip(rows / max(horizon, 1), 0, 1)
    img[:horizon] = (top * (1 - frac) + bottom * frac)[:horizon]
    depth[:horizon] = 1.0

    # sun disc
    cy = rng.uniform(0.1, 0.8) * horizon
    cx = rng.uniform(0.1, 0.9) * w
    rad = rng.uniform(0.04, 0.09) * w
    yy, xx = np.mgrid[0:h, 0:w]
    disc = ((yy - cy) ** 2 + (xx - cx) ** 2) < rad**2
    disc &= yy < horizon
    img[disc] = rng.uniform(0.85, 1.0, size=3)

    # ground: textured plane, depth shrinking toward the camera
    ground_color = rng.uniform(0.2, 0.6, size=3)
    tex = _value_noise(rng, h, w, cells=10, amp=0.35) + _value_noise(rng, h, w, cells=28, amp=0.15)
    ground = ground_color * (0.75 + tex)
    img[horizon:] = ground[horizon:]
    gfrac = (rows - horizon) / max(h - horizon, 1)
    depth[horizon:] = np.clip(0.65 * (1 - gfrac), 0.05, 1.0)[horizon:]

    # box structures standing on the horizon line
    for _ in range(int(rng.integers(2, 5))):
        bw = int(rng.uniform(0.08, 0.2) * w)
        bh = int(rng.uniform(0.25, 0.6) * horizon)
        x0 = int(rng.uniform(0, w - bw))
        y0 = horizon - bh
        y1 = min(h, horizon + int(0.08 * h))
        color = rng.uniform(0.15, 0.8, size=3)
        d = rng.uniform(0.3, 0.85)
        block_tex = _value_noise(rng, y1 - y0, bw, cells=6, amp=0.2)
        img[y0:y1, x0 : x0 + bw] = clamp01(color * (0.85 + block_tex))
        depth[y0:y1, x0 : x0 + bw] = d

    return clamp01(img), clamp01(depth)


def generate_fixture_corpus(root, num_scenes=8, height=128, width=160, seed=0):
    """Write `num_scenes` clear/depth image pairs under `root`; returns scene ids."""
    clear_dir = os.path.join(root, "clear")
    depth_dir = os.path.join(root, "depth")
    os.makedirs(clear_dir, exist_ok=True)
    os.makedirs(depth_dir, exist_ok=True)
    scene_ids = []
    for k in range(num_scenes):
        rng = np.random.default_rng(seed * 100003 + k)
        img, depth = _render_scene(rng, height, width)
        scene_id = f"scene_{k:03d}"
        save_image(img, os.path.join(clear_dir, scene_id + ".png"))
        save_image(depth, os.path.join(depth_dir, scene_id + ".png"))
        scene_ids.append(scene_id)
    return scene_ids
