"""Class activation maps and saliency-map storage.

For a model ending in global average pooling followed by a linear head, the
class activation map is the head-weighted sum of the last feature maps. The
gradient of the logit with respect to each feature cell is ``w_c / (h*w)``,
so Grad-CAM's channel weights are proportional to the head weights and both
maps coincide up to a positive scale.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .raster import as_raster, load_image, resize_bilinear, save_image

COMPUTED_CAM = "computed_cam"
EXTERNAL_FILE = "external_file"

_MAGIC = b"SALM"
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class SaliencyMap:
    map: np.ndarray
    source: str = COMPUTED_CAM
    image_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "map", as_raster(self.map))
        if self.source not in (COMPUTED_CAM, EXTERNAL_FILE):
            raise ValueError(f"unknown saliency source {self.source!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.map.shape

    def normalized(self) -> np.ndarray:
        """Min-max scaled copy in [0, 1] (constant maps become all zeros)."""
        lo, hi = float(self.map.min()), float(self.map.max())
        if hi <= lo:
            return np.zeros_like(self.map)
        return (self.map - lo) / (hi - lo)


def _check_features(features: np.ndarray, class_weights) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3:
        raise ValueError(f"feature stack must be (h, w, channels), got shape {feats.shape}")
    weights = np.asarray(class_weights, dtype=np.float64).ravel()
    if weights.shape[0] != feats.shape[2]:
        raise ValueError(
            f"class_weights has length {weights.shape[0]} but the feature stack has "
            f"{feats.shape[2]} channels"
        )
    return feats, weights


def cam_linear(features: np.ndarray, class_weights) -> np.ndarray:
    """Weighted channel sum before rectification."""
    feats, weights = _check_features(features, class_weights)
    return feats @ weights


def compute_cam(features: np.ndarray, class_weights, image_id: str = "") -> SaliencyMap:
    """Rectified class activation map at feature resolution."""
    linear = cam_linear(features, class_weights)
    return SaliencyMap(np.maximum(linear, 0.0), COMPUTED_CAM, image_id)


def upsample_to_image(sal: SaliencyMap, h: int, w: int) -> SaliencyMap:
    fh, fw = sal.shape
    if h < fh or w < fw:
        raise ValueError(f"cannot upsample a {fh}x{fw} map down to {h}x{w}")
    return replace(sal, map=resize_bilinear(sal.map, h, w))


def save_saliency(sal: SaliencyMap, path) -> None:
    """Write ``sal`` in the raw format, or as a 16-bit PNG if ``path`` ends in ``.png``.

    PNG export min-max normalises the map; the raw format stores floats verbatim.
    """
    path = os.fspath(path)
    if path.lower().endswith(".png"):
        save_image(sal.normalized(), path, bitdepth=16)
        return
    h, w = sal.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, h, w))
        fh.write(sal.map.astype("<f4").tobytes())


def load_saliency(path, image_id: str | None = None) -> SaliencyMap:
    path = os.fspath(path)
    if image_id is None:
        image_id = os.path.splitext(os.path.basename(path))[0]
    if not os.path.exists(path):
        raise FileNotFoundError(f"saliency map not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == _MAGIC:
            rest = fh.read(_HEADER.size - 4)
            if len(rest) != _HEADER.size - 4:
                raise OSError(f"corrupt saliency file {path}: truncated header")
            _, h, w = _HEADER.unpack(head + rest)
            payload = fh.read()
            expected = 4 * h * w
            if len(payload) != expected:
                raise OSError(
                    f"corrupt saliency file {path}: header declares {h}x{w} "
                    f"({h * w} floats) but payload holds {len(payload) / 4:g}"
                )
            data = np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)
            return SaliencyMap(data, EXTERNAL_FILE, image_id)
    if head != b"\x89PNG":
        raise OSError(f"unsupported saliency file {path}: neither SALM nor PNG")
    img = load_image(path)
    if img.shape[2] != 1:
        raise OSError(f"saliency PNG must be grayscale: {path}")
    return SaliencyMap(img[:, :, 0], EXTERNAL_FILE, image_id)
