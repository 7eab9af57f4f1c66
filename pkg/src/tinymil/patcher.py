"""Instance extraction: saliency-guided patches, random patches and grid tiles."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .raster import crop_centered

SALIMAP = "salimap"
RANDOM = "random"
GRID = "grid"


@dataclass
class PatchRecord:
    bag_id: str
    rank_j: int
    a: int
    b: int
    side_l: int
    patch: np.ndarray = field(repr=False)
    selection_saliency: float = 0.0
    degenerate_flag: bool = False
    origin: str = SALIMAP

    def manifest_row(self, patch_path: str | None = None) -> dict:
        return {
            "bag_id": self.bag_id,
            "rank_j": self.rank_j,
            "a": self.a,
            "b": self.b,
            "side_l": self.side_l,
            "selection_saliency": self.selection_saliency,
            "degenerate_flag": self.degenerate_flag,
            "origin": self.origin,
            "patch_path": patch_path,
        }


@dataclass(frozen=True)
class PatchPolicy:
    k: int = 5
    l: int = 64
    mode: str = SALIMAP
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.l < 2 or self.l % 2:
            raise ValueError(f"patch side l must be a positive even integer, got {self.l}")
        if self.mode not in (SALIMAP, RANDOM, GRID):
            raise ValueError(f"unknown patch mode {self.mode!r}")


def _check_side(shape, l: int) -> int:
    h, w = shape[:2]
    if l < 2 or l % 2:
        raise ValueError(f"patch side l must be a positive even integer, got {l}")
    if l > min(h, w):
        raise ValueError(f"patch side {l} exceeds the image size {h}x{w}")
    return l // 2


def patch_salimap(img: np.ndarray, sal, k: int = 5, l: int = 64, bag_id: str = "") -> list[PatchRecord]:
    """Select ``k`` patches of side ``l`` around successive saliency maxima.

    Each pick takes the row-major-first argmax of a private working copy of
    the map, clamps the center so the ``l x l`` window stays in frame, crops,
    and then occludes the cropped window in the working map with the map's
    current minimum. ``sal`` may be a :class:`SaliencyMap` or a 2-D array.
    """
    smap = getattr(sal, "map", sal)
    smap = np.asarray(smap)
    h, w = img.shape[:2]
    if smap.shape != (h, w):
        raise ValueError(f"saliency shape {smap.shape} does not match image shape {(h, w)}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    half = _check_side(img.shape, l)
    if not bag_id:
        bag_id = getattr(sal, "image_id", "") or ""

    work = np.array(smap, dtype=np.float64, copy=True)
    records = []
    for j in range(1, k + 1):
        flat = int(np.argmax(work))
        a, b = divmod(flat, w)
        picked = float(work[a, b])
        a = min(max(a, half), h - half)
        b = min(max(b, half), w - half)
        patch = crop_centered(img, a, b, half)
        low = float(work.min())
        work[a - half:a + half, b - half:b + half] = low
        records.append(PatchRecord(
            bag_id=bag_id, rank_j=j, a=a, b=b, side_l=l, patch=patch,
            selection_saliency=picked, degenerate_flag=picked == low, origin=SALIMAP,
        ))
    return records


def random_patches(img: np.ndarray, k: int, l: int, seed, bag_id: str = "") -> list[PatchRecord]:
    """``k`` patches with centers drawn uniformly from the valid clamped range."""
    h, w = img.shape[:2]
    half = _check_side(img.shape, l)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    records = []
    for j in range(1, k + 1):
        a = int(rng.integers(half, h - half + 1))
        b = int(rng.integers(half, w - half + 1))
        records.append(PatchRecord(
            bag_id=bag_id, rank_j=j, a=a, b=b, side_l=l,
            patch=crop_centered(img, a, b, half), origin=RANDOM,
        ))
    return records


def grid_patches(img: np.ndarray, l: int, bag_id: str = "") -> list[PatchRecord]:
    h, w = img.shape[:2]
    half = _check_side(img.shape, l)
    if h % l or w % l:
        raise ValueError(
            f"a {h}x{w} image does not tile into {l}x{l} patches; resize it to a multiple of {l} first"
        )
    records = []
    for i in range(h // l):
        for jj in range(w // l):
            a, b = i * l + half, jj * l + half
            records.append(PatchRecord(
                bag_id=bag_id, rank_j=len(records) + 1, a=a, b=b, side_l=l,
                patch=crop_centered(img, a, b, half), origin=GRID,
            ))
    return records


def write_patch_manifest(rows, path) -> None:
    """Write manifest rows (dicts) as JSON lines."""
    with open(os.fspath(path), "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_patch_manifest(path) -> list[dict]:
    with open(os.fspath(path)) as fh:
        return [json.loads(line) for line in fh if line.strip()]
