from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DatasetError


def read_image(path) -> np.ndarray:
    """8-bit RGB file -> float32 (H, W, 3) in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def to_uint8(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def write_image(path, image):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False)


def quantize(image) -> np.ndarray:
    """What an image looks like after an 8-bit round trip."""
    return to_uint8(image).astype(np.float32) / 255.0
