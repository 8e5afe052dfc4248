"""Adverse-task harness: softmax classifiers for demographic attributes."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .ctl import TrainingDivergedError, _as_features

__all__ = [
    "TASKS",
    "ATTR_HEADER",
    "softmax_cross_entropy",
    "AttributeClassifier",
    "train_classifier",
    "accuracy",
    "chance_level",
    "AttrRow",
    "write_attr_csv",
    "render_attr_table",
]

TASKS = ("gender", "age_group", "ethnicity")
ATTR_HEADER = ["task", "epsilon", "b", "c", "accuracy", "chance_uniform", "chance_majority"]


def _softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    return P / P.sum(axis=1, keepdims=True)


def softmax_cross_entropy(W, bias, X, y):
    """Mean cross-entropy of ``softmax(X W^T + bias)`` and its gradients.

    Returns ``(loss, dW, dbias)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    Z = X @ W.T + bias
    Zs = Z - Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(Zs).sum(axis=1))
    n = len(X)
    loss = float((logsum - Zs[np.arange(n), y]).mean())
    G = _softmax(Z)
    G[np.arange(n), y] -= 1.0
    G /= n
    return loss, G.T @ X, G.sum(axis=0)


class AttributeClassifier(BaseEstimator, ClassifierMixin):
    """Linear softmax classifier over block colour histograms.

    Parameters
    ----------
    task : str
        Label name, one of ``gender``, ``age_group``, ``ethnicity``; used
        for reporting only.
    n_classes : int or None
        Task cardinality. Inferred as ``max(y) + 1`` when ``None``.
    grid, bins : int
        Histogram feature configuration (ignored for 2-D feature input).
    epochs, lr : full-batch gradient descent schedule.
    seed : int
        Seeds the small random initial weights.

    Attributes
    ----------
    coef_ : ndarray of shape (n_classes, n_features)
    intercept_ : ndarray of shape (n_classes,)
    loss_trace_ : list of float
    """

    def __init__(self, task="gender", n_classes=None, grid=4, bins=8, epochs=300,
                 lr=1.0, seed=0):
        self.task = task
        self.n_classes = n_classes
        self.grid = grid
        self.bins = bins
        self.epochs = epochs
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        F = _as_features(X, self.grid, self.bins)
        y = check_array(np.asarray(y), ensure_2d=False, dtype=np.int64)
        if len(y) != len(F):
            raise ValueError(f"{len(F)} samples but {len(y)} labels")
        if len(np.unique(y)) < 2:
            raise ValueError("training labels contain a single class")
        C = int(self.n_classes) if self.n_classes is not None else int(y.max()) + 1
        if y.min() < 0 or y.max() >= C:
            raise ValueError(f"labels must lie in [0, {C})")
        rng = np.random.default_rng(self.seed)
        W = rng.normal(0.0, 0.01, size=(C, F.shape[1]))
        bias = np.zeros(C)
        trace = []
        for epoch in range(self.epochs):
            loss, dW, db = softmax_cross_entropy(W, bias, F, y)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite cross-entropy at epoch {epoch}")
            trace.append(loss)
            W -= self.lr * dW
            bias -= self.lr * db
        self.coef_, self.intercept_ = W, bias
        self.classes_ = np.arange(C)
        self.loss_trace_ = trace
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return _as_features(X, self.grid, self.bins) @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        # argmax breaks ties towards the lowest class index
        return np.argmax(self.decision_function(X), axis=1)


def train_classifier(X, y, task="gender", n_classes=None, grid=4, bins=8,
                     epochs=300, lr=1.0, seed=0) -> AttributeClassifier:
    return AttributeClassifier(task, n_classes, grid, bins, epochs, lr, seed).fit(X, y)


def accuracy(classifier, X, y) -> float:
    """Percentage of argmax-correct predictions."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    return 100.0 * float(np.mean(classifier.predict(X) == y))


def chance_level(y, kind: str = "uniform", n_classes: int | None = None) -> float:
    """Uninformed accuracy: ``100 / C`` or the majority-class frequency."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty label set")
    if kind == "uniform":
        C = n_classes if n_classes is not None else int(y.max()) + 1
        return 100.0 / C
    if kind == "majority":
        return 100.0 * np.bincount(y).max() / len(y)
    raise ValueError(f"kind must be 'uniform' or 'majority', got {kind!r}")


@dataclass
class AttrRow:
    task: str
    epsilon: str
    b: int
    c: int
    accuracy: float
    chance_uniform: float
    chance_majority: float
    delta_f: float = 0.0
    strict_delta_f: float = 0.0
    strict: bool = False
    seed: int = 0
    n_eval: int = 0


def write_attr_csv(rows, path=None) -> str:
    """CSV led by ``task,epsilon,b,c,accuracy,chance_uniform,chance_majority``."""
    names = [f.name for f in fields(AttrRow)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for row in rows:
        d = asdict(row)
        for k in ("accuracy", "chance_uniform", "chance_majority"):
            d[k] = f"{d[k]:.4f}"
        d["delta_f"] = f"{row.delta_f:.0f}" if float(row.delta_f).is_integer() else repr(row.delta_f)
        d["strict_delta_f"] = f"{row.strict_delta_f:.0f}"
        w.writerow([d[n] for n in names])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def render_attr_table(rows, caption: str, row_key=lambda r: r.epsilon, row_title="Noise e") -> str:
    tasks = [t for t in TASKS if any(r.task == t for r in rows)]
    table, chance = {}, {}
    for r in rows:
        table.setdefault(row_key(r), {})[r.task] = r.accuracy
        chance[r.task] = r.chance_uniform
    width = max([len(row_title)] + [len(str(k)) for k in table]) + 1
    lines = [caption, f"{row_title:>{width}} | " + " ".join(f"{t:>10}" for t in tasks), "-" * (width + 3 + 11 * len(tasks))]
    for key, accs in table.items():
        lines.append(f"{key!s:>{width}} | " + " ".join(
            f"{accs[t]:>9.1f}%" if t in accs else f"{'-':>10}" for t in tasks))
    lines.append(f"{'chance':>{width}} | " + " ".join(f"{chance[t]:>9.1f}%" for t in tasks))
    return "\n".join(lines) + "\n"
