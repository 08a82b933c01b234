"""PNG <-> float-array conversions used across the pipeline.

Arrays are (H, W, 3) float64 in [0, 1]; encoding clips and rounds to 8-bit
RGB. Pillow's PNG writer emits no timestamp chunks, so identical pixels
always produce identical bytes.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from .errors import InvalidInputError


def png_to_array(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            rgb = img.convert("RGB")
            return np.asarray(rgb, dtype=np.float64) / 255.0
    except Exception as exc:
        raise InvalidInputError(f"not a decodable image: {exc}") from exc


def array_to_png(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(f"expected (H, W, 3) array, got shape {arr.shape}")
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(quantized, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def thumbnail_png(data: bytes, long_edge: int = 512) -> bytes:
    """Downscale so the longer side is at most ``long_edge``; never upscale."""
    with Image.open(io.BytesIO(data)) as img:
        rgb = img.convert("RGB")
        w, h = rgb.size
        scale = long_edge / max(w, h)
        if scale < 1.0:
            rgb = rgb.resize((max(1, round(w * scale)), max(1, round(h * scale))), Image.LANCZOS)
        buf = io.BytesIO()
        rgb.save(buf, format="PNG")
        return buf.getvalue()
