"""Small shared helpers: stable seeding, image IO, hashing."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IoError


def stable_seed(*parts) -> int:
    """Derive a 63-bit seed from arbitrary parts, stable across runs and platforms."""
    text = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def load_image_rgb(path: str | Path) -> np.ndarray:
    """Load an image file as an HxWx3 uint8 array."""
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise IoError(f"cannot read image {path}: {e}") from e


def save_png(image: np.ndarray, path: str | Path) -> None:
    """Write an HxWx3 uint8 array as a lossless PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")
    except OSError as e:
        raise IoError(f"cannot write image {path}: {e}") from e
