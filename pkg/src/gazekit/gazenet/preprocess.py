"""Eye-crop extraction and input normalization.

Pixel coordinates are continuous: pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``
and its center sits at ``(c + 0.5, r + 0.5)``. Landmarks and boxes from the
manifest use the same convention.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DecodeError, DegenerateCrop

CROP_SCALE = 1.5
MIN_CORNER_DISTANCE = 4.0


@dataclass
class EyeInputs:
    left_crop: np.ndarray   # (S, S, 3), mirrored horizontally
    right_crop: np.ndarray  # (S, S, 3)
    corners: np.ndarray     # (8,) in [0, 1], left-eye x mirrored


def load_image(path):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc


def crop_box(inner, outer):
    """Square crop ``(cx, cy, side)`` around one eye's two corner landmarks."""
    inner = np.asarray(inner, dtype=np.float64)
    outer = np.asarray(outer, dtype=np.float64)
    dist = float(np.hypot(*(outer - inner)))
    if dist < MIN_CORNER_DISTANCE:
        raise DegenerateCrop(f"eye corners only {dist:.2f} px apart")
    cx, cy = (inner + outer) / 2.0
    return float(cx), float(cy), CROP_SCALE * dist


def crop_resize(image, cx, cy, side, out_size):
    """Bilinearly resample the square ``side`` x ``side`` window centred at
    ``(cx, cy)`` onto an ``out_size`` grid. Samples outside the image read 0."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    scale = side / out_size
    offs = (np.arange(out_size) + 0.5) * scale - 0.5
    xs = cx - side / 2.0 + offs
    ys = cy - side / 2.0 + offs
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    if img.ndim == 2:
        img = img[..., None]

    def tap(yi, xi):
        valid = ((yi >= 0) & (yi < h))[:, None] & ((xi >= 0) & (xi < w))[None, :]
        v = img[np.clip(yi, 0, h - 1)[:, None], np.clip(xi, 0, w - 1)[None, :]]
        return v * valid[..., None]

    wx = fx[None, :, None]
    wy = fy[:, None, None]
    top = tap(y0, x0) * (1 - wx) + tap(y0, x0 + 1) * wx
    bot = tap(y0 + 1, x0) * (1 - wx) + tap(y0 + 1, x0 + 1) * wx
    out = top * (1 - wy) + bot * wy
    return out if np.ndim(image) == 3 else out[..., 0]


def normalize_pixels(arr):
    """Map [0, 255] to [-1, 1]."""
    return np.asarray(arr, dtype=np.float64) / 127.5 - 1.0


def mirror(crop):
    return crop[:, ::-1]


def preprocess(record, image, crop_size=128, dtype=np.float32):
    """Build network inputs for one frame from its decoded RGB ``image``."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DecodeError(f"expected an RGB image, got array of shape {image.shape}")
    h, w = image.shape[:2]
    c = np.asarray(record.corners(), dtype=np.float64).reshape(4, 2)
    l_inner, l_outer, r_inner, r_outer = c
    lx, ly, lside = crop_box(l_inner, l_outer)
    rx, ry, rside = crop_box(r_inner, r_outer)
    left = mirror(normalize_pixels(crop_resize(image, lx, ly, lside, crop_size)))
    right = normalize_pixels(crop_resize(image, rx, ry, rside, crop_size))
    norm = c / np.array([w, h], dtype=np.float64)
    norm[:2, 0] = 1.0 - norm[:2, 0]
    return EyeInputs(
        left_crop=np.ascontiguousarray(left, dtype=dtype),
        right_crop=np.ascontiguousarray(right, dtype=dtype),
        corners=norm.reshape(8).astype(dtype),
    )


def preprocess_records(records, root, crop_size=128, dtype=np.float32, image_cache=None):
    """Preprocess a sequence of records into stacked arrays.

    Returns ``(arrays, skipped)`` where ``arrays`` holds ``left``, ``right``,
    ``corners``, ``targets`` and ``keys`` and ``skipped`` lists
    ``(key, reason)`` for frames that could not be prepared.
    """
    root = Path(root)
    lefts, rights, corners, targets, keys, skipped = [], [], [], [], [], []
    for rec in records:
        key = rec.key
        try:
            if not rec.eyes_valid:
                raise DegenerateCrop("eyes not valid")
            if image_cache is not None and rec.image_path in image_cache:
                img = image_cache[rec.image_path]
            else:
                img = load_image(root / rec.image_path)
            x = preprocess(rec, img, crop_size=crop_size, dtype=dtype)
        except (DecodeError, DegenerateCrop) as exc:
            skipped.append((key, str(exc)))
            continue
        lefts.append(x.left_crop)
        rights.append(x.right_crop)
        corners.append(x.corners)
        targets.append((rec.gaze.x_cm, rec.gaze.y_cm))
        keys.append(key)
    s = crop_size
    arrays = {
        "left": np.stack(lefts) if lefts else np.zeros((0, s, s, 3), dtype),
        "right": np.stack(rights) if rights else np.zeros((0, s, s, 3), dtype),
        "corners": np.stack(corners) if corners else np.zeros((0, 8), dtype),
        "targets": np.asarray(targets, dtype=dtype).reshape(-1, 2),
        "keys": keys,
    }
    return arrays, skipped
