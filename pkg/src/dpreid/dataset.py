"""Labelled person-image datasets: manifest CSVs and a synthetic generator.

Two CSV layouts are recognised by their header::

    path,person_id,camera_id,split          # re-identification records
    path,gender,age_group,ethnicity         # demographic attribute records

Paths are relative to the dataset root (the CSV's directory by default).
"""

from __future__ import annotations

import colorsys
import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image_core import read_image, save_ppm

__all__ = [
    "SPLITS",
    "PersonRecord",
    "AttributeRecord",
    "DatasetManifest",
    "ManifestError",
    "parse_market_filename",
    "load_manifest",
    "write_person_csv",
    "write_attribute_csv",
    "synth_generate",
]

SPLITS = ("train", "query", "gallery")
PERSON_HEADER = ["path", "person_id", "camera_id", "split"]
ATTRIBUTE_HEADER = ["path", "gender", "age_group", "ethnicity"]

_MARKET_NAME = re.compile(r"^(\d+)_c(\d+)s(\d+)_")


class ManifestError(ValueError):
    """Raised for malformed manifests or inconsistent image sets."""


@dataclass(frozen=True)
class PersonRecord:
    image_path: str
    person_id: int
    camera_id: int
    split: str


@dataclass(frozen=True)
class AttributeRecord:
    image_path: str
    gender: int
    age_group: int
    ethnicity: int

    def label(self, task: str) -> int:
        return getattr(self, task)


@dataclass
class DatasetManifest:
    root: Path
    width: int
    height: int
    persons: list = field(default_factory=list)
    attributes: list = field(default_factory=list)
    n_age: int = 9
    n_ethnicity: int = 7

    @property
    def records(self):
        return self.persons + self.attributes

    def split(self, name: str) -> list:
        return [r for r in self.persons if r.split == name]

    def cardinality(self, task: str) -> int:
        return {"gender": 2, "age_group": self.n_age, "ethnicity": self.n_ethnicity}[task]

    def load_images(self, records) -> np.ndarray:
        imgs = [read_image(self.root / r.image_path) for r in records]
        if not imgs:
            return np.empty((0, self.height, self.width, 3), np.uint8)
        return np.stack(imgs)


def parse_market_filename(name: str) -> tuple[int, int]:
    """``'0002_c1s1_000451_03.jpg'`` -> ``(2, 1)``."""
    m = _MARKET_NAME.match(Path(name).name)
    if m is None:
        raise ManifestError(f"not a Market1501-style filename: {name!r}")
    return int(m.group(1)), int(m.group(2))


def _int_field(row, key, lineno):
    try:
        return int(row[key])
    except (TypeError, ValueError):
        raise ManifestError(f"line {lineno}: {key} must be an integer, got {row[key]!r}") from None


def load_manifest(csv_path, root=None, n_age: int = 9, n_ethnicity: int = 7,
                  check_images: bool = True) -> DatasetManifest:
    """Read and validate a manifest CSV; record order follows the file.

    All referenced images must exist and share one size.
    """
    csv_path = Path(csv_path)
    root = Path(root) if root is not None else csv_path.parent
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        if set(PERSON_HEADER) <= set(header):
            kind = "person"
        elif set(ATTRIBUTE_HEADER) <= set(header):
            kind = "attribute"
        else:
            raise ManifestError(
                f"{csv_path}: header must contain {PERSON_HEADER} or {ATTRIBUTE_HEADER}, got {header}"
            )
        persons, attributes = [], []
        for lineno, row in enumerate(reader, start=2):
            path = row["path"]
            if kind == "person":
                pid = _int_field(row, "person_id", lineno)
                cam = _int_field(row, "camera_id", lineno)
                split = row["split"].strip()
                if pid < 0 or cam < 1:
                    raise ManifestError(f"line {lineno}: invalid person/camera id ({pid}, {cam})")
                if split not in SPLITS:
                    raise ManifestError(f"line {lineno}: split must be one of {SPLITS}, got {split!r}")
                persons.append(PersonRecord(path, pid, cam, split))
            else:
                rec = AttributeRecord(
                    path,
                    _int_field(row, "gender", lineno),
                    _int_field(row, "age_group", lineno),
                    _int_field(row, "ethnicity", lineno),
                )
                for task, card in (("gender", 2), ("age_group", n_age), ("ethnicity", n_ethnicity)):
                    if not 0 <= rec.label(task) < card:
                        raise ManifestError(
                            f"line {lineno}: {task}={rec.label(task)} outside [0, {card})"
                        )
                attributes.append(rec)

    width = height = 0
    if check_images:
        for rec in persons + attributes:
            try:
                img = read_image(root / rec.image_path)
            except (OSError, ValueError) as exc:
                raise ManifestError(f"cannot read image {rec.image_path}: {exc}") from exc
            h, w = img.shape[:2]
            if width == 0:
                width, height = w, h
            elif (w, h) != (width, height):
                raise ManifestError(
                    f"image {rec.image_path} is {w}x{h}, expected {width}x{height}; "
                    "all images must share dimensions"
                )
    return DatasetManifest(root, width, height, persons, attributes, n_age, n_ethnicity)


def write_person_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PERSON_HEADER)
        for r in records:
            w.writerow([r.image_path, r.person_id, r.camera_id, r.split])


def write_attribute_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTRIBUTE_HEADER)
        for r in records:
            w.writerow([r.image_path, r.gender, r.age_group, r.ethnicity])


# --- synthetic data -------------------------------------------------------

_SKIN_LIGHT = np.array([240.0, 205.0, 175.0])
_SKIN_DARK = np.array([85.0, 55.0, 35.0])
_HUE_BUCKETS = 6


def _rgb(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v)) * 255.0


def _bucket(x, lo, hi, n):
    return min(n - 1, max(0, int(math.floor((x - lo) / (hi - lo) * n))))


def _jittered_hue(rng, k):
    # even buckets sit on the primaries (one dominant channel), odd buckets
    # on the secondaries (two dominant channels)
    return (k + rng.uniform(-0.2, 0.2)) / _HUE_BUCKETS


def _identity(rng, k, k_bottom, n_age, n_ethnicity):
    top_hue = _jittered_hue(rng, k)
    bottom_hue = _jittered_hue(rng, k_bottom)
    torso = rng.uniform(0.35, 0.6)
    skin = rng.uniform(0.0, 1.0)
    return {
        "top": _rgb(top_hue, rng.uniform(0.9, 1.0), rng.uniform(0.9, 1.0)),
        "bottom": _rgb(bottom_hue, rng.uniform(0.9, 1.0), rng.uniform(0.6, 0.7)),
        "skin": _SKIN_LIGHT + skin * (_SKIN_DARK - _SKIN_LIGHT),
        "torso": torso,
        "body": rng.uniform(0.4, 0.6),
        "gender": k % 2,
        "age_group": _bucket(torso, 0.35, 0.6, n_age),
        "ethnicity": _bucket(skin, 0.0, 1.0, n_ethnicity),
    }


def _camera(rng):
    return {
        "tint": rng.uniform(0.92, 1.08, size=3),
        "shift": rng.uniform(-12.0, 12.0),
        "background": rng.uniform(60.0, 200.0) + rng.uniform(-25.0, 25.0, size=3),
    }


def _render(person, cam, w, h, rng):
    img = np.empty((h, w, 3))
    img[:] = cam["background"]
    dx, dy = rng.integers(-2, 3, size=2)
    cx = w / 2 + dx
    half = person["body"] * w / 2
    x0, x1 = int(round(cx - half)), int(round(cx + half))
    head0, head1 = int(round(0.06 * h)) + dy, int(round(0.18 * h)) + dy
    torso1 = head1 + int(round(person["torso"] * 0.76 * h))
    feet = int(round(0.94 * h)) + dy
    hx = max(1, int(round(half * 0.45)))
    rows = lambda a, b: slice(max(0, a), max(0, min(h, b)))  # noqa: E731
    cols = lambda a, b: slice(max(0, a), max(0, min(w, b)))  # noqa: E731
    img[rows(head0, head1), cols(int(round(cx)) - hx, int(round(cx)) + hx)] = person["skin"]
    img[rows(head1, torso1), cols(x0, x1)] = person["top"]
    img[rows(torso1, feet), cols(x0, x1)] = person["bottom"]
    img = img * cam["tint"] + cam["shift"] + rng.normal(0.0, 4.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_generate(out_dir, n_ids: int, n_cameras: int, imgs_per_pair: int,
                   width: int = 64, height: int = 128, seed: int = 0,
                   train_fraction: float = 0.5, n_age: int = 9,
                   n_ethnicity: int = 7) -> DatasetManifest:
    """Write a seeded multi-camera dataset of colour-block figures.

    Every identity appears ``imgs_per_pair`` times in each camera. Training
    identities (``floor(train_fraction * n_ids)``, capped so at least two
    identities remain for evaluation) keep all their images in ``train``;
    every other identity has one randomly chosen camera's images in
    ``query`` and the rest in ``gallery``.

    Files written under ``out_dir``: ``images/*.ppm`` with Market1501-style
    names, ``persons.csv``, ``attributes.csv`` and its identity-disjoint
    halves ``attributes_train.csv`` / ``attributes_test.csv``.
    """
    if n_ids < 2:
        raise ValueError(f"need at least 2 identities, got {n_ids}")
    if n_cameras < 2:
        raise ValueError(f"query/gallery split needs at least 2 cameras, got {n_cameras}")
    if imgs_per_pair < 1:
        raise ValueError("imgs_per_pair must be positive")
    if not 0.0 <= train_fraction < 1.0:
        raise ValueError("train_fraction must lie in [0, 1)")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    # every run of 6 consecutive identities covers all top and all bottom hue
    # buckets once; bottoms share the top's parity, shifted by 2 or 4 buckets
    buckets = np.concatenate([rng.permutation(_HUE_BUCKETS) for _ in range(-(-n_ids // _HUE_BUCKETS))])
    people = []
    for i in range(n_ids):
        k = int(buckets[i])
        k_bottom = (k + 2 * (1 + (i // _HUE_BUCKETS) % 2)) % _HUE_BUCKETS
        people.append(_identity(rng, k, k_bottom, n_age, n_ethnicity))
    cams = [_camera(rng) for _ in range(n_cameras)]
    n_train = max(0, min(int(math.floor(train_fraction * n_ids)), n_ids - 2))
    query_cam = rng.integers(n_cameras, size=n_ids)

    persons, attributes = [], []
    for i, person in enumerate(people):
        pid = i + 1
        for ci, cam in enumerate(cams):
            if i < n_train:
                split = "train"
            else:
                split = "query" if ci == query_cam[i] else "gallery"
            for k in range(imgs_per_pair):
                rel = f"images/{pid:04d}_c{ci + 1}s1_{k:06d}_00.ppm"
                (out_dir / rel).write_bytes(save_ppm(_render(person, cam, width, height, rng)))
                persons.append(PersonRecord(rel, pid, ci + 1, split))
                attributes.append(
                    AttributeRecord(rel, person["gender"], person["age_group"], person["ethnicity"])
                )

    write_person_csv(out_dir / "persons.csv", persons)
    write_attribute_csv(out_dir / "attributes.csv", attributes)
    is_train = [p.split == "train" for p in persons]
    write_attribute_csv(out_dir / "attributes_train.csv",
                        [a for a, t in zip(attributes, is_train) if t])
    write_attribute_csv(out_dir / "attributes_test.csv",
                        [a for a, t in zip(attributes, is_train) if not t])
    return DatasetManifest(out_dir, width, height, persons, attributes, n_age, n_ethnicity)
