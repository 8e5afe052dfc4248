"""Histogram features and the trainable linear embedder."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .image_core import check_image

__all__ = [
    "CHECKPOINT_VERSION",
    "hist_features",
    "hist_features_batch",
    "feature_dim",
    "HistogramFeatures",
    "LinearEmbedder",
    "embed",
    "embed_gradient",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


def feature_dim(grid: int, bins: int) -> int:
    return grid * grid * 3 * bins


def _check_config(grid, bins, h=None, w=None):
    if grid < 1:
        raise ValueError(f"grid side must be >= 1, got {grid}")
    if bins < 2 or 256 % bins:
        raise ValueError(f"bins must be >= 2 and divide 256, got {bins}")
    if h is not None and grid > min(h, w):
        raise ValueError(f"grid side {grid} exceeds image size {w}x{h}")


def hist_features_batch(images, grid: int = 4, bins: int = 8) -> np.ndarray:
    """Features for a stack of same-sized images, shape ``(n, grid*grid*3*bins)``.

    Each image is cut into ``grid x grid`` spatial blocks (row-major); within
    a block, each channel contributes a ``bins``-bin intensity histogram
    normalised to sum to one.
    """
    X = np.asarray(images)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[3] != 3:
        raise ValueError(f"expected images of shape (n, h, w, 3), got {X.shape}")
    if X.dtype != np.uint8:
        X = np.stack([check_image(x) for x in X]) if len(X) else X.astype(np.uint8)
    n, h, w, _ = X.shape
    _check_config(grid, bins, h, w)
    F = feature_dim(grid, bins)
    if n == 0:
        return np.zeros((0, F))

    row_block = (np.arange(h) * grid) // h
    col_block = (np.arange(w) * grid) // w
    block = row_block[:, None] * grid + col_block[None, :]  # (h, w)
    base = (block[:, :, None] * 3 + np.arange(3)[None, None, :]) * bins  # (h, w, 3)
    idx = base[None] + (X // (256 // bins)).astype(np.int64)
    idx += (np.arange(n, dtype=np.int64) * F)[:, None, None, None]
    counts = np.bincount(idx.ravel(), minlength=n * F).reshape(n, F).astype(np.float64)

    block_pixels = np.bincount(block.ravel(), minlength=grid * grid)
    norm = np.repeat(block_pixels, 3 * bins)
    return counts / norm[None, :]


def hist_features(img, grid: int = 4, bins: int = 8) -> np.ndarray:
    return hist_features_batch(check_image(img)[None], grid, bins)[0]


class HistogramFeatures(BaseEstimator, TransformerMixin):
    """Stateless transformer: image stack -> block colour histograms."""

    def __init__(self, grid=4, bins=8):
        self.grid = grid
        self.bins = bins

    def fit(self, X, y=None):
        _check_config(self.grid, self.bins)
        self.n_features_out_ = feature_dim(self.grid, self.bins)
        return self

    def transform(self, X):
        return hist_features_batch(X, self.grid, self.bins)


class LinearEmbedder:
    """``embedding = weights @ features`` with no bias and no normalisation."""

    def __init__(self, weights, grid: int = 4, bins: int = 8):
        weights = np.asarray(weights, dtype=np.float64)
        _check_config(grid, bins)
        if weights.ndim != 2 or weights.shape[1] != feature_dim(grid, bins):
            raise ValueError(
                f"weights must be (D, {feature_dim(grid, bins)}) for grid={grid}, bins={bins}; "
                f"got {weights.shape}"
            )
        self.weights = weights
        self.grid = grid
        self.bins = bins

    @classmethod
    def random(cls, dim: int = 32, grid: int = 4, bins: int = 8, seed: int = 0):
        F = feature_dim(grid, bins)
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, 1.0 / np.sqrt(F), size=(dim, F)), grid, bins)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def features(self, images) -> np.ndarray:
        return hist_features_batch(images, self.grid, self.bins)

    def embed_features(self, F) -> np.ndarray:
        F = np.asarray(F, dtype=np.float64)
        if F.shape[-1] != self.n_features:
            raise ValueError(f"feature dim {F.shape[-1]} != embedder input dim {self.n_features}")
        return F @ self.weights.T

    def copy(self):
        return LinearEmbedder(self.weights.copy(), self.grid, self.bins)


def embed(embedder: LinearEmbedder, img) -> np.ndarray:
    return embedder.embed_features(hist_features(img, embedder.grid, embedder.bins))


def embed_gradient(embedder: LinearEmbedder, img, upstream) -> np.ndarray:
    """Gradient of a loss w.r.t. the weights given d(loss)/d(embedding)."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (embedder.dim,):
        raise ValueError(f"upstream must have shape ({embedder.dim},), got {upstream.shape}")
    return np.outer(upstream, hist_features(img, embedder.grid, embedder.bins))


def save_checkpoint(path, embedder: LinearEmbedder) -> None:
    """Write the embedder as text.

    Line 1 is ``# dpreid-embedder v1 g=<grid> B=<bins> D=<dim> F=<features>``;
    then ``D`` comma-separated rows of ``F`` weights in round-trip precision.
    """
    header = (
        f"dpreid-embedder v{CHECKPOINT_VERSION} g={embedder.grid} B={embedder.bins} "
        f"D={embedder.dim} F={embedder.n_features}"
    )
    np.savetxt(path, embedder.weights, fmt="%.17g", delimiter=",", header=header)


def load_checkpoint(path) -> LinearEmbedder:
    path = Path(path)
    with open(path) as fh:
        first = fh.readline()
    parts = first.lstrip("# ").split()
    if len(parts) < 2 or parts[0] != "dpreid-embedder":
        raise ValueError(f"{path}: not an embedder checkpoint")
    if parts[1] != f"v{CHECKPOINT_VERSION}":
        raise ValueError(f"{path}: unsupported checkpoint version {parts[1]}")
    meta = dict(p.split("=", 1) for p in parts[2:])
    g, B, D, F = (int(meta[k]) for k in ("g", "B", "D", "F"))
    weights = np.loadtxt(path, delimiter=",", ndmin=2)
    if weights.shape != (D, F):
        raise ValueError(f"{path}: header says {D}x{F} but found {weights.shape}")
    return LinearEmbedder(weights, g, B)
