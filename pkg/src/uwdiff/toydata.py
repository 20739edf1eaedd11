"""Procedural toy corpus: in-air scenes and underwater-looking templates."""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .imageio import save_rgb
from .manifest import DatasetManifest, ManifestRecord


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def natural_scene(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    c0 = _hsv(rng.random(), rng.uniform(0.2, 0.7), rng.uniform(0.55, 0.95))
    c1 = _hsv(rng.random(), rng.uniform(0.2, 0.7), rng.uniform(0.35, 0.9))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = (1 - ramp)[..., None] * c0 + ramp[..., None] * c1
    for _ in range(rng.integers(2, 5)):
        color = _hsv(rng.random(), rng.uniform(0.4, 0.9), rng.uniform(0.3, 1.0))
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.1, 0.3)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < rng.uniform(0.1, 0.3))
        img[mask] = color
    img = gaussian_filter(img, sigma=(0.6, 0.6, 0))
    return np.clip(img, 0.0, 1.0)


def underwater_template(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    hue = rng.uniform(0.42, 0.6)
    top = _hsv(hue, rng.uniform(0.5, 0.9), rng.uniform(0.55, 0.85))
    bottom = _hsv(hue + rng.uniform(-0.04, 0.04), rng.uniform(0.6, 1.0), rng.uniform(0.15, 0.4))
    img = (1 - yy)[..., None] * top + yy[..., None] * bottom
    blobs = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8)
    blobs /= max(np.abs(blobs).max(), 1e-9)
    img = img * (1 + 0.15 * blobs[..., None])
    img += 0.02 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def make_toy_corpus(out_dir, n_natural: int = 96, n_templates: int = 8, size: int = 32, seed: int = 0):
    """Write ``natural/*.png``, ``templates/*.png`` and ``natural.jsonl``; returns the manifest path."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_natural):
        name = f"n{i:04d}"
        save_rgb(out_dir / "natural" / f"{name}.png", natural_scene(rng, size))
        records.append(ManifestRecord(id=name, reference_path=f"natural/{name}.png"))
    for j in range(n_templates):
        save_rgb(out_dir / "templates" / f"t{j:03d}.png", underwater_template(rng, size))
    return DatasetManifest(records=records, split="toy", root=out_dir).save(out_dir / "natural.jsonl")
