"""Synthetic tiny-object benchmark: faint Gaussian blobs on textured, blurred backgrounds."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .raster import save_image


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 600
    image_side: int = 256
    blob_radius: tuple = (3, 5)
    blobs_per_positive: tuple = (1, 3)
    positive_ratio: float = 0.5
    contrast: float = 0.3
    texture_scale: float = 16.0
    grain: tuple = (0.015, 0.025)
    blur: tuple = (0.0, 0.8)
    seed: int = 0

    def __post_init__(self):
        rmin, rmax = self.blob_radius
        if not 1 <= rmin <= rmax:
            raise ValueError(f"invalid blob radius range {self.blob_radius}")
        if rmax > self.image_side / 16:
            raise ValueError(f"blob radius {rmax} exceeds image_side/16 = {self.image_side / 16}")
        bmin, bmax = self.blobs_per_positive
        if not 1 <= bmin <= bmax:
            raise ValueError(f"invalid blobs-per-positive range {self.blobs_per_positive}")
        if not 0 < self.positive_ratio < 1:
            raise ValueError(f"positive_ratio must lie in (0, 1), got {self.positive_ratio}")
        if self.n_images < 1:
            raise ValueError("n_images must be positive")


def _background(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    side = cfg.image_side
    smooth = ndimage.gaussian_filter(rng.normal(size=(side, side)), cfg.texture_scale, mode="wrap")
    smooth = (smooth - smooth.mean()) / (smooth.std() + 1e-12)
    level = rng.uniform(0.35, 0.6)
    amp = rng.uniform(0.03, 0.08)
    grain = rng.normal(0.0, rng.uniform(*cfg.grain), size=(side, side))
    return level + amp * smooth + grain


def render_image(rng: np.random.Generator, cfg: SynthConfig, positive: bool):
    """Return ``(image, blobs)`` where ``blobs`` lists ``(row, col, radius)``."""
    side = cfg.image_side
    img = _background(rng, cfg)
    sigma_blur = rng.uniform(*cfg.blur)
    blobs = []
    if positive:
        n = int(rng.integers(cfg.blobs_per_positive[0], cfg.blobs_per_positive[1] + 1))
        yy, xx = np.mgrid[0:side, 0:side]
        for _ in range(n):
            radius = float(rng.uniform(*cfg.blob_radius))
            lo, hi = int(np.ceil(radius)), side - 1 - int(np.ceil(radius))
            r = int(rng.integers(lo, hi + 1))
            c = int(rng.integers(lo, hi + 1))
            sigma = radius / 2.0
            amp = cfg.contrast * rng.uniform(0.8, 1.2)
            img = img + amp * np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * sigma ** 2))
            blobs.append((r, c, radius))
    if sigma_blur > 0.3:
        img = ndimage.gaussian_filter(img, sigma_blur, mode="reflect")
    return np.clip(img, 0.0, 1.0).astype(np.float32), blobs


def generate_dataset(config: SynthConfig, out_dir) -> dict:
    """Write ``out_dir/{positive,negative}/*.png`` and ``ground_truth.json``.

    Image ``i`` is rendered from a generator seeded by ``(config.seed, i)``,
    so output is reproducible image by image. The ground truth (blob centers)
    is for tests only; the pipeline reads nothing but folder labels.
    """
    out_dir = os.fspath(out_dir)
    try:
        for sub in ("positive", "negative"):
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    n_pos = int(round(config.n_images * config.positive_ratio))
    labels = np.array([True] * n_pos + [False] * (config.n_images - n_pos))
    np.random.default_rng(config.seed).shuffle(labels)
    width = len(str(config.n_images - 1))
    records = []
    for i, positive in enumerate(labels):
        rng = np.random.default_rng([config.seed, i])
        img, blobs = render_image(rng, config, bool(positive))
        label = "positive" if positive else "negative"
        bag_id = f"img{i:0{width}d}"
        rel = os.path.join(label, bag_id + ".png")
        save_image(img, os.path.join(out_dir, rel), bitdepth=16)
        records.append({
            "bag_id": bag_id,
            "label": label,
            "path": rel,
            "blobs": [{"row": r, "col": c, "radius": round(rad, 6)} for r, c, rad in blobs],
        })
    truth = {"config": _config_dict(config), "images": records}
    with open(os.path.join(out_dir, "ground_truth.json"), "w") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
    return truth


def _config_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
