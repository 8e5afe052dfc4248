"""Raster representation, PPM I/O and float-domain image helpers.

Images are plain numpy arrays of shape ``(height, width, 3)``: ``uint8`` for
stored rasters and ``float64`` for the intermediate domain where block means
and noise are computed before the final clamp.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

__all__ = [
    "PPMError",
    "PPMHeaderError",
    "PPMMaxvalError",
    "PPMTruncatedError",
    "check_image",
    "load_ppm",
    "save_ppm",
    "read_image",
    "write_image",
    "to_float",
    "clamp_round",
]


class PPMError(ValueError):
    """Base class for binary PPM parse failures."""


class PPMHeaderError(PPMError):
    pass


class PPMMaxvalError(PPMError):
    pass


class PPMTruncatedError(PPMError):
    pass


# magic, then width/height/maxval separated by whitespace and optional comments
_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\d+)")


def check_image(img, *, dtype=np.uint8, name="image"):
    """Validate an image array and return it as a C-contiguous array.

    ``dtype=np.uint8`` enforces the stored-raster invariants (channel values
    in [0, 255] follow from the dtype); ``np.float64`` accepts any real
    values.
    """
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (height, width, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be at least 1x1, got {arr.shape[:2]}")
    if dtype is np.uint8:
        if arr.dtype != np.uint8:
            if not np.issubdtype(arr.dtype, np.integer):
                raise TypeError(f"{name} must be uint8, got {arr.dtype}")
            if arr.min() < 0 or arr.max() > 255:
                raise ValueError(f"{name} has channel values outside [0, 255]")
            arr = arr.astype(np.uint8)
    else:
        arr = arr.astype(dtype, copy=False)
    return np.ascontiguousarray(arr)


def load_ppm(data: bytes) -> np.ndarray:
    """Parse a binary (P6, maxval 255) PPM into a ``(h, w, 3)`` uint8 array."""
    data = bytes(data)
    if data[:2] != b"P6":
        raise PPMHeaderError("not a binary PPM: magic number must be 'P6'")
    pos = 2
    fields = []
    for field in ("width", "height", "maxval"):
        m = _TOKEN.match(data, pos)
        if m is None or m.start(1) == pos:
            # a number glued to the magic or previous field is not a separator
            raise PPMHeaderError(f"malformed PPM header: cannot read {field}")
        fields.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PPMHeaderError(f"PPM dimensions must be positive, got {width}x{height}")
    if maxval != 255:
        raise PPMMaxvalError(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise PPMHeaderError("PPM header must end with a single whitespace byte")
    pos += 1
    n = width * height * 3
    payload = data[pos : pos + n]
    if len(payload) < n:
        raise PPMTruncatedError(f"PPM payload truncated: expected {n} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def save_ppm(img) -> bytes:
    """Encode an image in canonical P6 form: ``P6\\n<w> <h>\\n255\\n`` + payload."""
    img = check_image(img)
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def read_image(path) -> np.ndarray:
    """Read a raster file. PPM is handled natively; other formats need Pillow."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return load_ppm(path.read_bytes())
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ImportError(f"reading {path.suffix} files requires Pillow") from exc
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, img) -> None:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        path.write_bytes(save_ppm(img))
        return
    from PIL import Image

    Image.fromarray(check_image(img)).save(path)


def to_float(img) -> np.ndarray:
    return check_image(img).astype(np.float64)


def clamp_round(img) -> np.ndarray:
    """Clamp to [0, 255] and round half away from zero into a uint8 raster.

    Infinities saturate; NaN raises ``ValueError``.
    """
    arr = np.asarray(img, dtype=np.float64)
    if np.isnan(arr).any():
        raise ValueError("image contains NaN channel values")
    clipped = np.clip(arr, 0.0, 255.0)
    # non-negative here; compare the exact fraction, since x + 0.5 can round up
    # in floating point (0.49999999999999994 + 0.5 == 1.0)
    lo = np.floor(clipped)
    return (lo + (clipped - lo >= 0.5)).astype(np.uint8)
