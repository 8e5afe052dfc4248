"""Class centroids, centroid triplet loss and the embedder training loop."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .embedding import LinearEmbedder, hist_features_batch

__all__ = [
    "Centroid",
    "CtlConfig",
    "CTLGradients",
    "TrainingDivergedError",
    "centroid",
    "ctl_loss",
    "ctl_gradients",
    "batch_ctl",
    "sample_batches",
    "train",
    "CentroidEmbedder",
]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Centroid:
    values: np.ndarray
    class_id: object = None
    support_count: int = 0


@dataclass(frozen=True)
class CtlConfig:
    margin: float = 0.3
    P: int = 8
    K: int = 4
    lr: float = 0.1
    epochs: int = 30
    seed: int = 0
    negative: str = "hardest"

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.P < 2 or self.K < 2:
            raise ValueError(f"need P >= 2 and K >= 2, got P={self.P}, K={self.K}")
        if self.epochs < 0 or self.lr < 0:
            raise ValueError("epochs and lr must be non-negative")
        if self.negative not in ("hardest", "random"):
            raise ValueError(f"negative must be 'hardest' or 'random', got {self.negative!r}")


def centroid(embeddings, class_id=None) -> Centroid:
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim == 1:
        E = E[None]
    if E.shape[0] == 0:
        raise ValueError("cannot take the centroid of an empty support set")
    return Centroid(E.mean(axis=0), class_id, E.shape[0])


def _values(c):
    return np.asarray(c.values if isinstance(c, Centroid) else c, dtype=np.float64)


def ctl_loss(anchor, c_pos, c_neg, margin: float) -> float:
    """``max(0, |a - c_pos|^2 - |a - c_neg|^2 + margin)``."""
    a, p, n = np.asarray(anchor, dtype=np.float64), _values(c_pos), _values(c_neg)
    if not a.shape == p.shape == n.shape:
        raise ValueError(f"dimension mismatch: {a.shape}, {p.shape}, {n.shape}")
    return max(0.0, float(np.sum((a - p) ** 2) - np.sum((a - n) ** 2) + margin))


class CTLGradients(NamedTuple):
    anchor: np.ndarray
    positive: np.ndarray  # one row per positive support embedding
    negative: np.ndarray  # one row per negative support embedding


def ctl_gradients(anchor, pos_support, neg_support, margin: float) -> CTLGradients:
    """Gradients of ``ctl_loss`` w.r.t. the anchor and each support embedding.

    Centroids are the means of ``pos_support`` and ``neg_support``, so each
    support row receives the centroid gradient divided by the support size.
    """
    a = np.asarray(anchor, dtype=np.float64)
    SP = np.atleast_2d(np.asarray(pos_support, dtype=np.float64))
    SN = np.atleast_2d(np.asarray(neg_support, dtype=np.float64))
    if SP.shape[1] != a.shape[0] or SN.shape[1] != a.shape[0]:
        raise ValueError("dimension mismatch between anchor and supports")
    cp, cn = centroid(SP).values, centroid(SN).values
    if ctl_loss(a, cp, cn, margin) <= 0.0:
        return CTLGradients(np.zeros_like(a), np.zeros_like(SP), np.zeros_like(SN))
    gp = 2.0 * (a - cp)
    gn = 2.0 * (a - cn)
    return CTLGradients(
        gp - gn,
        np.tile(-gp / len(SP), (len(SP), 1)),
        np.tile(gn / len(SN), (len(SN), 1)),
    )


def batch_ctl(E, labels, margin: float, negative: str = "hardest", rng=None):
    """Mean CTL over every anchor of a batch, and its gradient w.r.t. ``E``.

    The positive centroid of an anchor is the mean of its class batch-mates
    with the anchor left out; the negative centroid is the nearest (or, with
    ``negative='random'``, a random) other-class centroid of the batch.
    """
    E = np.asarray(E, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(E)
    classes, inv = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("a batch needs at least two classes")
    counts = np.bincount(inv)
    if counts.min() < 2:
        raise ValueError("every class in a batch needs at least two instances")
    sums = np.zeros((len(classes), E.shape[1]))
    np.add.at(sums, inv, E)
    C = sums / counts[:, None]

    cpos = (sums[inv] - E) / (counts[inv] - 1)[:, None]
    d_all = ((E[:, None, :] - C[None, :, :]) ** 2).sum(-1)
    d_all[np.arange(n), inv] = np.inf
    if negative == "hardest":
        neg = np.argmin(d_all, axis=1)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        offs = rng.integers(1, len(classes), size=n)
        neg = (inv + offs) % len(classes)
    dp = ((E - cpos) ** 2).sum(1)
    dn = ((E - C[neg]) ** 2).sum(1)
    raw = dp - dn + margin
    active = raw > 0
    # np.maximum keeps NaN, so overflow surfaces as a non-finite loss
    loss = float(np.maximum(raw, 0.0).mean())

    gp = 2.0 * (E - cpos) * active[:, None]
    gn = 2.0 * (E - C[neg]) * active[:, None]
    grad = gp - gn
    # positive centroid excludes the anchor: mates get -gp / (n_k - 1)
    gp_sum = np.zeros_like(sums)
    np.add.at(gp_sum, inv, gp)
    grad -= (gp_sum[inv] - gp) / (counts[inv] - 1)[:, None]
    gn_sum = np.zeros_like(sums)
    np.add.at(gn_sum, neg, gn)
    grad += gn_sum[inv] / counts[inv][:, None]
    return loss, grad / n


def sample_batches(labels, P: int, K: int, seed: int = 0):
    """One epoch of P-classes x K-instances batches (arrays of indices).

    Classes are visited in a seeded random order so each appears at least
    once; the final batch is topped up with other random classes. Classes
    with fewer than ``K`` images are sampled with replacement.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < P:
        raise ValueError(f"need at least P={P} classes, found {len(classes)}")
    rng = np.random.default_rng(seed)
    members = {k: np.flatnonzero(labels == k) for k in classes}
    order = rng.permutation(classes)
    batches = []
    for start in range(0, len(order), P):
        chosen = list(order[start : start + P])
        if len(chosen) < P:
            rest = np.setdiff1d(classes, chosen)
            chosen += list(rng.choice(rest, size=P - len(chosen), replace=False))
        idx = []
        for k in chosen:
            pool = members[k]
            idx.append(rng.choice(pool, size=K, replace=len(pool) < K))
        batches.append(np.concatenate(idx))
    return batches


def train(embedder: LinearEmbedder, features, labels, config: CtlConfig):
    """Plain gradient descent on the mean batch CTL.

    Returns a new embedder and the per-epoch mean loss trace. The input
    embedder is left untouched.
    """
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    model = embedder.copy()
    W = model.weights
    rng = np.random.default_rng(config.seed)
    trace = []
    for epoch in range(config.epochs):
        batch_seed = int(rng.integers(2**63))
        neg_rng = np.random.default_rng(batch_seed + 1)
        losses = []
        for idx in sample_batches(labels, config.P, config.K, batch_seed):
            Xb = X[idx]
            loss, gE = batch_ctl(Xb @ W.T, labels[idx], config.margin, config.negative, neg_rng)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite CTL loss at epoch {epoch}; lower the learning rate "
                    f"(lr={config.lr})"
                )
            losses.append(loss)
            if config.lr:
                W -= config.lr * (gE.T @ Xb)
        trace.append(float(np.mean(losses)))
    return model, trace


def _as_features(X, grid, bins):
    X = np.asarray(X)
    if X.ndim == 4:
        return hist_features_batch(X, grid, bins)
    return check_array(X, dtype=np.float64)


class CentroidEmbedder(BaseEstimator, TransformerMixin):
    """Linear embedder trained with the centroid triplet loss.

    ``fit`` and ``transform`` accept either an image stack ``(n, h, w, 3)``
    or precomputed histogram features ``(n, F)``.

    Attributes
    ----------
    embedder_ : LinearEmbedder
    loss_trace_ : list of float
        Mean batch loss for each epoch.
    """

    def __init__(self, dim=32, grid=4, bins=8, margin=0.3, P=8, K=4, lr=0.1,
                 epochs=30, negative="hardest", seed=0):
        self.dim = dim
        self.grid = grid
        self.bins = bins
        self.margin = margin
        self.P = P
        self.K = K
        self.lr = lr
        self.epochs = epochs
        self.negative = negative
        self.seed = seed

    def config(self) -> CtlConfig:
        return CtlConfig(self.margin, self.P, self.K, self.lr, self.epochs, self.seed, self.negative)

    def fit(self, X, y):
        F = _as_features(X, self.grid, self.bins)
        init = LinearEmbedder.random(self.dim, self.grid, self.bins, seed=self.seed)
        self.embedder_, self.loss_trace_ = train(init, F, y, self.config())
        return self

    def transform(self, X):
        check_is_fitted(self, "embedder_")
        return self.embedder_.embed_features(_as_features(X, self.grid, self.bins))
