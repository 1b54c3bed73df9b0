"""PNG reading and writing for RGB images in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError


def read_png(path) -> np.ndarray:
    """``(H, W, 3)`` float32 in [0, 1]; grayscale and RGBA are converted to RGB."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    return arr.astype(np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    # np.rint rounds half to even
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise DataError(f"{path}: expected (H, W, 3) image, got {img.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path)
