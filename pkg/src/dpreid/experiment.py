"""Run configuration and the obfuscate -> train -> evaluate cell runner.

The CLI commands and the sweep share these functions, so one sweep cell is
exactly the composition of ``obfuscate``, ``train``, ``eval-reid`` and
``eval-attr`` with the same configuration and seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attribute import TASKS, AttributeClassifier, AttrRow, accuracy, chance_level
from .ctl import CtlConfig, train
from .dataset import DatasetManifest, load_manifest
from .dp_mechanism import PrivacyParams, image_rng, obfuscate, sensitivity
from .embedding import LinearEmbedder, hist_features_batch
from .retrieval import ReidRow, evaluate_embeddings

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "RunConfig",
    "DEFAULT_GRID",
    "DEFAULT_EPSILONS",
    "ablation_grid",
    "parse_epsilon",
    "format_epsilon",
    "load_dataset",
    "obfuscate_images",
    "train_embedder",
    "evaluate_reid",
    "evaluate_attributes",
    "run_cell",
]

DEFAULT_GRID = [(1, 64), (2, 32), (4, 16)]
DEFAULT_EPSILONS = [1e-3, 1.0, 1e3, 1e6, None]


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 1)."""


def parse_epsilon(value):
    if value is None:
        return None
    if isinstance(value, str):
        if value.strip().lower() == "none":
            return None
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(f"epsilon must be a positive number or 'none', got {value!r}") from None
    value = float(value)
    if not value > 0 or math.isinf(value):
        raise ConfigError(f"epsilon must be a positive finite number or 'none', got {value!r}")
    return value


def format_epsilon(eps) -> str:
    return "none" if eps is None else f"{eps:g}"


def ablation_grid(width: int, height: int):
    """``(b, 1)`` for b = 2, 4, ... and ``(1, c)`` for c = 2, ..., 128, after ``(1, 1)``."""
    grid = [(1, 1)]
    b = 2
    while b <= min(width, height):
        grid.append((b, 1))
        b *= 2
    grid += [(1, 2**k) for k in range(1, 8)]
    return grid


@dataclass
class RunConfig:
    """Flat, JSON-serialisable configuration shared by every command."""

    dataset: str | None = None
    out: str | None = None
    seed: int = 0
    jobs: int = 1
    strict: bool = False
    midpoint: bool = False
    camera_aware: bool = True
    # single-cell parameters (obfuscate)
    epsilon: object = None
    b: int = 1
    c: int = 1
    # sweep grid
    grid: list = field(default_factory=lambda: [list(p) for p in DEFAULT_GRID])
    epsilons: list = field(default_factory=lambda: [format_epsilon(e) for e in DEFAULT_EPSILONS])
    ablation: bool = False
    # embedder / CTL
    embed_dim: int = 32
    grid_side: int = 4
    bins: int = 8
    margin: float = 0.3
    P: int = 8
    K: int = 4
    lr: float = 0.1
    epochs: int = 30
    negative: str = "hardest"
    checkpoint: str | None = None
    # attribute classifiers
    tasks: list = field(default_factory=lambda: list(TASKS))
    clf_lr: float = 1.0
    clf_epochs: int = 300
    # synthetic data
    n_ids: int = 40
    n_cameras: int = 3
    imgs_per_pair: int = 8
    width: int = 64
    height: int = 128
    train_fraction: float = 0.5
    n_age: int = 9
    n_ethnicity: int = 7

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def privacy(self, b=None, c=None, epsilon="_") -> PrivacyParams:
        eps = self.epsilon if epsilon == "_" else epsilon
        try:
            return PrivacyParams(parse_epsilon(eps), self.b if b is None else b,
                                 self.c if c is None else c, self.strict, self.midpoint)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def ctl(self) -> CtlConfig:
        try:
            return CtlConfig(self.margin, self.P, self.K, self.lr, self.epochs, self.seed, self.negative)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def sweep_grid(self, width: int, height: int):
        if self.ablation:
            return ablation_grid(width, height)
        return [tuple(int(v) for v in p) for p in self.grid]

    def sweep_epsilons(self):
        return [None] if self.ablation else [parse_epsilon(e) for e in self.epsilons]

    def validate(self) -> None:
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not self.epsilons:
            raise ConfigError("epsilon list must be non-empty")
        for e in self.epsilons:
            parse_epsilon(e)
        for p in self.grid:
            if len(p) != 2:
                raise ConfigError(f"grid entries must be [b, c] pairs, got {p!r}")
            self.privacy(int(p[0]), int(p[1]), None)
        self.privacy()
        self.ctl()
        for t in self.tasks:
            if t not in TASKS:
                raise ConfigError(f"unknown task {t!r}; choose from {TASKS}")


# --- data -----------------------------------------------------------------

def load_dataset(root, cfg: RunConfig):
    """Load ``persons.csv`` and the attribute manifests found under ``root``.

    Returns ``(persons, attr_train, attr_test)``; each is a manifest or None.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset directory not found: {root}")

    def opt(name):
        p = root / name
        return load_manifest(p, root, cfg.n_age, cfg.n_ethnicity) if p.exists() else None

    persons = opt("persons.csv")
    attr_train, attr_test = opt("attributes_train.csv"), opt("attributes_test.csv")
    if attr_train is None or attr_test is None:
        full = opt("attributes.csv")
        if full is not None:
            attr_train, attr_test = _split_attributes(full, cfg.seed)
    if persons is None and attr_train is None:
        raise ConfigError(f"{root} has neither persons.csv nor attribute manifests")
    return persons, attr_train, attr_test


def _split_attributes(manifest: DatasetManifest, seed: int):
    rng = np.random.default_rng([seed, 0xA77])
    perm = rng.permutation(len(manifest.attributes))
    half = len(perm) // 2
    recs = manifest.attributes

    def sub(idx):
        return DatasetManifest(manifest.root, manifest.width, manifest.height, [],
                               [recs[i] for i in sorted(idx)], manifest.n_age, manifest.n_ethnicity)

    return sub(perm[:half]), sub(perm[half:])


def obfuscate_images(images, keys, params: PrivacyParams, seed: int) -> np.ndarray:
    """Obfuscate a stack; image ``i`` draws noise from ``image_rng(seed, keys[i])``."""
    out = np.empty_like(images)
    for i, (img, key) in enumerate(zip(images, keys)):
        out[i] = obfuscate(img, params, image_rng(seed, key))
    return out


# --- training and evaluation ------------------------------------------------

def train_embedder(images, person_ids, cfg: RunConfig):
    init = LinearEmbedder.random(cfg.embed_dim, cfg.grid_side, cfg.bins, seed=cfg.seed)
    feats = hist_features_batch(images, cfg.grid_side, cfg.bins)
    return train(init, feats, np.asarray(person_ids), cfg.ctl())


def _sens(width, height, b, c):
    s = sensitivity(width, height, b, c)
    return s.delta_f, s.strict_delta_f


def evaluate_reid(embedder: LinearEmbedder, query_images, query_records, gallery_images,
                  gallery_records, cfg: RunConfig, eps_label="none", b=1, c=1,
                  camera_modes=None) -> list:
    """ReidRows for regular mode and centroid mode (one per camera setting)."""
    h, w = query_images.shape[1:3]
    delta_f, strict_delta_f = _sens(w, h, b, c)
    q = embedder.embed_features(hist_features_batch(query_images, embedder.grid, embedder.bins))
    g = embedder.embed_features(hist_features_batch(gallery_images, embedder.grid, embedder.bins))
    qi = [r.person_id for r in query_records]
    qc = [r.camera_id for r in query_records]
    gi = [r.person_id for r in gallery_records]
    gc = [r.camera_id for r in gallery_records]
    if camera_modes is None:
        camera_modes = [cfg.camera_aware]
    rows = []
    for mode, cam in [("regular", True)] + [("centroid", m) for m in camera_modes]:
        score = evaluate_embeddings(q, qi, qc, g, gi, gc, mode=mode, camera_aware=cam)
        rows.append(ReidRow(mode, eps_label, b, c, score.mAP, score.top1, cam, delta_f,
                            strict_delta_f, cfg.strict, cfg.seed, score.n_queries))
    return rows


def evaluate_attributes(train_images, train_records, test_images, test_records,
                        cfg: RunConfig, cardinality, eps_label="none", b=1, c=1) -> list:
    h, w = train_images.shape[1:3]
    delta_f, strict_delta_f = _sens(w, h, b, c)
    F_tr = hist_features_batch(train_images, cfg.grid_side, cfg.bins)
    F_te = hist_features_batch(test_images, cfg.grid_side, cfg.bins)
    rows = []
    for task in cfg.tasks:
        y_tr = np.array([r.label(task) for r in train_records])
        y_te = np.array([r.label(task) for r in test_records])
        C = cardinality(task)
        if len(np.unique(y_tr)) < 2:
            log.warning("skipping %s: training labels contain a single class", task)
            continue
        clf = AttributeClassifier(task, C, cfg.grid_side, cfg.bins, cfg.clf_epochs,
                                  cfg.clf_lr, cfg.seed).fit(F_tr, y_tr)
        rows.append(AttrRow(task, eps_label, b, c, accuracy(clf, F_te, y_te),
                            chance_level(y_te, "uniform", C), chance_level(y_te, "majority"),
                            delta_f, strict_delta_f, cfg.strict, cfg.seed, len(y_te)))
    return rows


def run_cell(data, cfg: RunConfig, b: int, c: int, eps):
    """One (b, c, epsilon) cell on preloaded clean data.

    ``data`` maps ``"images"`` (relative path -> uint8 image), ``"persons"``,
    ``"attr_train"`` and ``"attr_test"`` (manifests or None). Returns
    ``(reid_rows, attr_rows, loss_trace)``.
    """
    params = cfg.privacy(b, c, eps)
    label = format_epsilon(eps)
    paths = sorted(data["images"])
    clean = np.stack([data["images"][p] for p in paths])
    noised = dict(zip(paths, obfuscate_images(clean, paths, params, cfg.seed)))

    def stack(records):
        return np.stack([noised[r.image_path] for r in records])

    reid_rows, attr_rows, trace = [], [], []
    persons = data["persons"]
    if persons is not None:
        train_recs = persons.split("train")
        query, gallery = persons.split("query"), persons.split("gallery")
        if train_recs and query and gallery:
            embedder, trace = train_embedder(stack(train_recs), [r.person_id for r in train_recs], cfg)
            reid_rows = evaluate_reid(embedder, stack(query), query, stack(gallery), gallery,
                                      cfg, label, b, c, camera_modes=[True, False])
    at, ae = data["attr_train"], data["attr_test"]
    if at is not None and ae is not None and at.attributes and ae.attributes:
        attr_rows = evaluate_attributes(stack(at.attributes), at.attributes, stack(ae.attributes),
                                        ae.attributes, cfg, at.cardinality, label, b, c)
    return reid_rows, attr_rows, trace


def load_cell_data(root, cfg: RunConfig) -> dict:
    persons, at, ae = load_dataset(root, cfg)
    images = {}
    for man in (persons, at, ae):
        if man is None:
            continue
        for rec in man.records:
            if rec.image_path not in images:
                images[rec.image_path] = man.load_images([rec])[0]
    return {"images": images, "persons": persons, "attr_train": at, "attr_test": ae}
