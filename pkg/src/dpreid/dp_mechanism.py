"""Image differential privacy: pixelisation, colour quantisation, Laplace noise.

The released value for an image is its grid of block means, each snapped to
one of ``256 / c`` colour levels per channel. Every cell channel then gets
one independent Laplace draw (replicated over the cell's pixels) with scale
``sensitivity / epsilon``, and the result is clamped back to 8-bit.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .image_core import check_image, clamp_round, to_float

__all__ = [
    "NOISE_DISABLED",
    "PrivacyParams",
    "Sensitivity",
    "sensitivity",
    "noise_scale",
    "cell_means",
    "expand_cells",
    "pixelise",
    "quantise",
    "cell_representation",
    "laplace_inverse_cdf",
    "laplace_sample",
    "laplace_noise",
    "image_rng",
    "obfuscate",
    "dp_log_ratio_bound",
    "ImageObfuscator",
]

# sentinel epsilon: skip the noising step entirely
NOISE_DISABLED = None


def _check_bin_width(c):
    if not isinstance(c, (int, np.integer)) or c < 1 or 256 % c:
        raise ValueError(f"bin width c must be a positive divisor of 256, got {c!r}")


def _check_block(b):
    if not isinstance(b, (int, np.integer)) or b < 1:
        raise ValueError(f"block side b must be a positive integer, got {b!r}")


@dataclass(frozen=True)
class PrivacyParams:
    """Mechanism parameters.

    ``epsilon=None`` disables noise (pixelisation and quantisation only).
    ``strict`` calibrates noise to the worst-case L1 distance between two
    released cell grids instead of the closed-form sensitivity; ``midpoint``
    uses bin centres instead of bin floors as quantisation representatives.
    """

    epsilon: float | None = NOISE_DISABLED
    b: int = 1
    c: int = 1
    strict: bool = False
    midpoint: bool = False

    def __post_init__(self):
        if self.epsilon is not None:
            eps = float(self.epsilon)
            if not eps > 0 or math.isinf(eps):
                raise ValueError(f"epsilon must be a positive finite real, got {self.epsilon!r}")
        _check_block(self.b)
        _check_bin_width(self.c)

    @property
    def noise_enabled(self) -> bool:
        return self.epsilon is not None

    def sensitivity(self, width: int, height: int) -> "Sensitivity":
        return sensitivity(width, height, self.b, self.c)

    def scale(self, width: int, height: int) -> float:
        """Laplace scale for images of the given size (0.0 when noise is off)."""
        if not self.noise_enabled:
            return 0.0
        sens = self.sensitivity(width, height)
        return noise_scale(sens.strict_delta_f if self.strict else sens.delta_f, self.epsilon)


class Sensitivity(NamedTuple):
    delta_f: float
    strict_delta_f: float
    cells: int


def sensitivity(w: int, h: int, b: int, c: int) -> Sensitivity:
    """Noise-calibration constants for ``w x h`` images.

    ``delta_f = (w*h / b**2) * (256/c - 1)**3`` is the closed form used to
    calibrate the mechanism. ``strict_delta_f = cells * 3 * (256 - c)`` is
    the largest possible L1 distance between two released cell grids, with
    ragged edge cells counted via ceilings.
    """
    _check_block(b)
    _check_bin_width(c)
    if w < 1 or h < 1:
        raise ValueError(f"image dimensions must be positive, got {w}x{h}")
    if b > min(w, h):
        raise ValueError(f"block side b={b} exceeds image dimensions {w}x{h}")
    levels = 256 // c - 1
    num = w * h * levels**3
    delta_f = num // (b * b) if num % (b * b) == 0 else num / (b * b)
    cells = math.ceil(w / b) * math.ceil(h / b)
    return Sensitivity(float(delta_f), float(cells * 3 * (256 - c)), cells)


def noise_scale(delta_f: float, epsilon: float) -> float:
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon!r}")
    return delta_f / epsilon


def _edges(n, b):
    return np.arange(0, n, b)


def cell_means(img, b: int) -> np.ndarray:
    """Per-channel mean of every ``b x b`` cell; shape ``(ceil(h/b), ceil(w/b), 3)``.

    Ragged cells at the right and bottom edges average over their actual
    pixel count.
    """
    _check_block(b)
    x = np.asarray(img, dtype=np.float64)
    h, w = x.shape[:2]
    rows, cols = _edges(h, b), _edges(w, b)
    sums = np.add.reduceat(np.add.reduceat(x, rows, axis=0), cols, axis=1)
    rh = np.minimum(rows + b, h) - rows
    cw = np.minimum(cols + b, w) - cols
    return sums / (rh[:, None, None] * cw[None, :, None])


def expand_cells(cells, b: int, height: int, width: int) -> np.ndarray:
    """Replicate each cell value over its pixels, cropping ragged edges."""
    out = np.repeat(np.repeat(np.asarray(cells), b, axis=0), b, axis=1)
    return out[:height, :width]


def pixelise(img, b: int) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    if b == 1:
        return x.copy()
    return expand_cells(cell_means(x, b), b, *x.shape[:2])


def quantise(img, c: int, midpoint: bool = False) -> np.ndarray:
    """Snap channel values to bins of width ``c``.

    Inputs are clamped to [0, 255] first. Each value maps to its bin floor
    ``floor(v / c) * c`` (maximum ``256 - c``), or to the bin's integer
    midpoint ``floor(v / c) * c + (c - 1) / 2`` when ``midpoint`` is set.
    """
    _check_bin_width(c)
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 255.0)
    out = np.floor(x / c) * c
    if midpoint:
        out += (c - 1) / 2.0
    return out


def cell_representation(img, b: int, c: int, midpoint: bool = False) -> np.ndarray:
    """The released (pre-noise) value of an image: quantised cell means."""
    return quantise(cell_means(to_float(img), b), c, midpoint=midpoint)


def laplace_inverse_cdf(u, scale: float):
    """Map ``u`` in (-1/2, 1/2) to a Laplace(0, scale) variate."""
    u = np.asarray(u, dtype=np.float64)
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def _open_uniform(rng, size):
    # numpy's random() is on [0, 1); drop exact zeros so u lies in (-1/2, 1/2)
    u = rng.random(size)
    zero = u == 0.0
    while np.any(zero):
        u[zero] = rng.random(int(zero.sum()))
        zero = u == 0.0
    return u - 0.5


def laplace_noise(scale: float, size, rng: np.random.Generator) -> np.ndarray:
    """Array of independent Laplace(0, scale) draws via the inverse CDF."""
    if not scale > 0:
        raise ValueError(f"Laplace scale must be positive, got {scale!r}")
    return laplace_inverse_cdf(_open_uniform(rng, size), scale)


def laplace_sample(scale: float, rng: np.random.Generator) -> float:
    return float(laplace_noise(scale, 1, rng)[0])


def image_rng(seed: int, key: str) -> np.random.Generator:
    """Generator for one image, derived from a global seed and a stable key.

    The key (typically the image's relative path) makes the draw independent
    of processing order.
    """
    return np.random.default_rng([int(seed), zlib.crc32(key.encode("utf-8"))])


def obfuscate(img, params: PrivacyParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply the mechanism to one uint8 image and return a uint8 image."""
    img = check_image(img)
    h, w = img.shape[:2]
    cells = cell_representation(img, params.b, params.c, midpoint=params.midpoint)
    if params.noise_enabled:
        scale = params.scale(w, h)
        if scale > 0:
            if rng is None:
                raise ValueError("a seeded generator is required when noise is enabled")
            cells = cells + laplace_noise(scale, cells.shape, rng)
    else:
        # sensitivity() also validates b against the image size
        params.sensitivity(w, h)
    return clamp_round(expand_cells(cells, params.b, h, w))


def dp_log_ratio_bound(u, v, scale: float) -> float:
    """Worst-case log density ratio of the noised outputs for inputs ``u``, ``v``.

    For independent Laplace noise this is ``||u - v||_1 / scale``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale!r}")
    return float(np.abs(u - v).sum() / scale)


class ImageObfuscator(BaseEstimator, TransformerMixin):
    """Transformer applying the privacy mechanism to a stack of images.

    Parameters
    ----------
    epsilon : float or None
        Privacy budget; ``None`` disables noise.
    b, c : int
        Pixelisation block side and quantisation bin width.
    strict, midpoint : bool
        See :class:`PrivacyParams`.
    seed : int
        Global seed. Image ``i`` uses a generator keyed on ``keys[i]`` (or on
        its index when no keys are given), so output does not depend on how
        images are batched.
    """

    def __init__(self, epsilon=None, b=1, c=1, strict=False, midpoint=False, seed=0):
        self.epsilon = epsilon
        self.b = b
        self.c = c
        self.strict = strict
        self.midpoint = midpoint
        self.seed = seed

    def fit(self, X, y=None):
        self.params_ = PrivacyParams(self.epsilon, self.b, self.c, self.strict, self.midpoint)
        return self

    def transform(self, X, keys=None):
        params = PrivacyParams(self.epsilon, self.b, self.c, self.strict, self.midpoint)
        if keys is None:
            keys = [str(i) for i in range(len(X))]
        if len(keys) != len(X):
            raise ValueError("keys must match the number of images")
        out = [obfuscate(x, params, image_rng(self.seed, k)) for x, k in zip(X, keys)]
        return np.stack(out) if out else np.empty((0, 0, 0, 3), np.uint8)
