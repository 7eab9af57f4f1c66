"""Grid types, PNG I/O, resizing, cropping and training-time augmentation.

Images are plain numpy arrays. A *raster* is a 2-D ``float32`` array; an
*image tensor* is a channel-last ``(H, W, C)`` ``float32`` array with values in
``[0, 1]`` and ``C`` in ``{1, 3}``. The ``as_raster``/``as_image`` helpers
validate and normalise inputs at module boundaries.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import png

ROTATION_STEP_DEG = 15
ZOOM_RANGE = (0.6, 1.4)
MAX_TRANSLATE_PX = 4


def as_raster(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"raster must be a non-empty 2-D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("raster contains non-finite values")
    return arr


def as_image(data) -> np.ndarray:
    """Return ``data`` as a validated ``(H, W, C)`` float32 image.

    2-D input is promoted to a single-channel image.
    """
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"image must be (H, W, C), got shape {arr.shape}")
    if arr.shape[2] not in (1, 3):
        raise ValueError(f"image must have 1 or 3 channels, got {arr.shape[2]}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must be finite and within [0, 1]")
    return arr


def luminance(img: np.ndarray) -> np.ndarray:
    """Single-channel view of an image (Rec. 601 weights for RGB)."""
    if img.ndim == 2:
        return img.astype(np.float32, copy=False)
    if img.shape[2] == 1:
        return img[:, :, 0]
    r, g, b = img[:, :, 0], img[:, :, 1], img[:, :, 2]
    return (0.299 * r + 0.587 * g + 0.114 * b).astype(np.float32)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _align_corners_coords(n_out: int, n_in: int) -> np.ndarray:
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out, dtype=np.float64)
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def _bilinear_sample(arr: np.ndarray, rows: np.ndarray, cols: np.ndarray, fill: float) -> np.ndarray:
    """Sample ``arr`` (H, W[, C]) at float coordinates; outside points get ``fill``."""
    h, w = arr.shape[:2]
    tol = 1e-6
    inside = (rows >= -tol) & (rows <= h - 1 + tol) & (cols >= -tol) & (cols <= w - 1 + tol)
    r = np.clip(rows, 0, h - 1)
    c = np.clip(cols, 0, w - 1)
    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(c).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    if arr.ndim == 3:
        fr = fr[..., None]
        fc = fc[..., None]
        inside_b = inside[..., None]
    else:
        inside_b = inside
    top = arr[r0, c0] * (1 - fc) + arr[r0, c1] * fc
    bottom = arr[r1, c0] * (1 - fc) + arr[r1, c1] * fc
    out = top * (1 - fr) + bottom * fr
    return np.where(inside_b, out, fill)


def resize_bilinear(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resize with the align-corners convention.

    Works on rasters (2-D) and image tensors (3-D); the output has the same
    rank as the input. Corner pixels map exactly onto corner pixels.
    """
    if new_h < 1 or new_w < 1:
        raise ValueError(f"resize target must be at least 1x1, got {new_h}x{new_w}")
    arr = np.asarray(img, dtype=np.float32)
    if arr.size == 0:
        raise ValueError("cannot resize an empty grid")
    h, w = arr.shape[:2]
    if (h, w) == (new_h, new_w):
        return arr.copy()
    src = arr.astype(np.float64)
    ry = _align_corners_coords(new_h, h)
    cx = _align_corners_coords(new_w, w)
    rows, cols = np.meshgrid(ry, cx, indexing="ij")
    out = _bilinear_sample(src, rows, cols, 0.0)
    return out.astype(np.float32)


def crop_centered(img: np.ndarray, center_row: int, center_col: int, half: int) -> np.ndarray:
    """Cut the ``2*half`` square whose top-left corner is ``(center - half)``.

    Rows ``[center_row - half, center_row + half)`` and the matching columns
    are returned. The caller must clamp the center first; an out-of-frame
    request raises ``IndexError``.
    """
    if half < 1:
        raise ValueError(f"half must be positive, got {half}")
    h, w = img.shape[:2]
    if not (half <= center_row <= h - half and half <= center_col <= w - half):
        raise IndexError(
            f"patch of half-size {half} centered at ({center_row}, {center_col}) "
            f"falls outside a {h}x{w} image"
        )
    return img[center_row - half:center_row + half, center_col - half:center_col + half].copy()


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    zoom: float = 1.0
    rotation_deg: int = 0
    flip_h: bool = False
    flip_v: bool = False
    translate_px: tuple[int, int] = (0, 0)

    def __post_init__(self):
        lo, hi = ZOOM_RANGE
        if not lo <= self.zoom <= hi:
            raise ValueError(f"zoom {self.zoom} outside [{lo}, {hi}]")
        if not 0 <= self.rotation_deg < 360 or self.rotation_deg % ROTATION_STEP_DEG:
            raise ValueError(f"rotation {self.rotation_deg} must be a multiple of 15 in [0, 360)")
        if len(self.translate_px) != 2 or any(abs(t) > MAX_TRANSLATE_PX for t in self.translate_px):
            raise ValueError(f"translation {self.translate_px} outside [-4, 4]")

    @classmethod
    def random(cls, rng: np.random.Generator) -> "AugmentSpec":
        return cls(
            zoom=float(rng.uniform(*ZOOM_RANGE)),
            rotation_deg=int(rng.integers(0, 360 // ROTATION_STEP_DEG)) * ROTATION_STEP_DEG,
            flip_h=bool(rng.integers(0, 2)),
            flip_v=bool(rng.integers(0, 2)),
            translate_px=(
                int(rng.integers(-MAX_TRANSLATE_PX, MAX_TRANSLATE_PX + 1)),
                int(rng.integers(-MAX_TRANSLATE_PX, MAX_TRANSLATE_PX + 1)),
            ),
        )


def _affine_about_center(img: np.ndarray, zoom: float, angle_deg: float, fill: float) -> np.ndarray:
    # inverse map: output pixel -> source pixel, counter-clockwise rotation in display coordinates
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = rr - cy, cc - cx
    src_x = (cos_t * dx - sin_t * dy) / zoom + cx
    src_y = (sin_t * dx + cos_t * dy) / zoom + cy
    return _bilinear_sample(img.astype(np.float64), src_y, src_x, fill).astype(np.float32)


def _translate(img: np.ndarray, dr: int, dc: int, fill: float) -> np.ndarray:
    h, w = img.shape[:2]
    out = np.full_like(img, fill)
    if abs(dr) >= h or abs(dc) >= w:
        return out
    out[max(dr, 0):h + min(dr, 0), max(dc, 0):w + min(dc, 0)] = \
        img[max(-dr, 0):h - max(dr, 0), max(-dc, 0):w - max(dc, 0)]
    return out


def augment(img: np.ndarray, spec: AugmentSpec, fill: float = 0.0) -> np.ndarray:
    """Apply zoom, rotation, flips and translation, in that order.

    Right-angle rotations that keep the frame shape are exact permutations;
    every other zoom/rotation is bilinearly resampled about the image center.
    """
    out = np.asarray(img, dtype=np.float32)
    h, w = out.shape[:2]
    if spec.zoom != 1.0:
        out = _affine_about_center(out, spec.zoom, 0.0, fill)
    if spec.rotation_deg:
        quarter, rem = divmod(spec.rotation_deg, 90)
        if rem == 0 and (h == w or quarter == 2):
            out = np.ascontiguousarray(np.rot90(out, k=quarter, axes=(0, 1)))
        else:
            out = _affine_about_center(out, 1.0, float(spec.rotation_deg), fill)
    if spec.flip_h:
        out = out[:, ::-1]
    if spec.flip_v:
        out = out[::-1]
    dr, dc = spec.translate_px
    if dr or dc:
        out = _translate(out, int(dr), int(dc), fill)
    return np.ascontiguousarray(out, dtype=np.float32)


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale/RGB PNG as a float image in [0, 1]."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"image not found: {path}")
    try:
        width, height, rows, info = png.Reader(filename=path).asDirect()
        data = np.vstack([np.asarray(row, dtype=np.uint32) for row in rows])
    except png.Error as exc:
        raise OSError(f"cannot decode PNG {path}: {exc}") from exc
    planes = info["planes"]
    if info.get("alpha"):
        raise OSError(f"unsupported PNG with alpha channel: {path}")
    if planes not in (1, 3):
        raise OSError(f"unsupported PNG with {planes} planes: {path}")
    maxval = float(2 ** info["bitdepth"] - 1)
    img = (data.reshape(height, width, planes) / maxval).astype(np.float32)
    return img


def save_image(img: np.ndarray, path, bitdepth: int = 16) -> None:
    """Write an image tensor (or raster) as a grayscale or RGB PNG."""
    if bitdepth not in (8, 16):
        raise ValueError(f"bitdepth must be 8 or 16, got {bitdepth}")
    arr = as_image(img)
    h, w, c = arr.shape
    maxval = 2 ** bitdepth - 1
    q = np.rint(arr.astype(np.float64) * maxval).astype(np.uint16 if bitdepth == 16 else np.uint8)
    writer = png.Writer(width=w, height=h, greyscale=(c == 1), bitdepth=bitdepth)
    with open(os.fspath(path), "wb") as fh:
        writer.write(fh, q.reshape(h, w * c))
