"""Query-vs-gallery ranking, mAP and CMC rank-1, instance or centroid based."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

__all__ = [
    "REID_HEADER",
    "RankingResult",
    "RetrievalScore",
    "ReidRow",
    "distance_matrix",
    "market_filter",
    "average_precision",
    "rank_query",
    "evaluate_embeddings",
    "evaluate",
    "write_reid_csv",
    "render_reid_table",
]

REID_HEADER = ["mode", "epsilon", "b", "c", "mAP", "top1"]


def distance_matrix(queries, gallery) -> np.ndarray:
    """Euclidean distances, shape ``(n_queries, n_gallery)``."""
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    G = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if Q.shape[1] != G.shape[1]:
        raise ValueError(f"dimension mismatch: {Q.shape[1]} vs {G.shape[1]}")
    # direct differences rather than the |q|^2 + |g|^2 - 2qg expansion, so
    # duplicate embeddings give exactly zero
    out = np.empty((len(Q), len(G)))
    step = max(1, 2**22 // max(1, G.size))
    for s in range(0, len(Q), step):
        out[s : s + step] = np.sqrt(((Q[s : s + step, None, :] - G[None]) ** 2).sum(-1))
    return out


def market_filter(query_id, query_cam, gallery_ids, gallery_cams):
    """Return ``(valid, relevant)`` boolean masks over the gallery.

    Same identity seen by the same camera is dropped from ranking; same
    identity from another camera is relevant.
    """
    gid = np.asarray(gallery_ids)
    gcam = np.asarray(gallery_cams)
    same_id = gid == query_id
    valid = ~(same_id & (gcam == query_cam))
    return valid, same_id & valid


def average_precision(relevance) -> float:
    """Mean of precision@k over the ranks k holding a relevant item."""
    rel = np.asarray(relevance, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise ValueError("average precision is undefined without relevant items")
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float((hits[rel] / ranks).sum() / n_rel)


@dataclass
class RankingResult:
    order: np.ndarray  # gallery indices, or centroid identity ids in centroid mode
    relevance: np.ndarray
    ap: float


class RetrievalScore(NamedTuple):
    mAP: float  # percent
    top1: float  # percent
    n_queries: int


def rank_query(distances, relevance) -> RankingResult:
    """Sort by non-decreasing distance, ties in original order."""
    order = np.argsort(np.asarray(distances), kind="stable")
    rel = np.asarray(relevance, dtype=bool)[order]
    return RankingResult(order, rel, average_precision(rel))


def _centroids(emb, ids, cams, exclude_cam):
    keep = np.ones(len(ids), bool) if exclude_cam is None else cams != exclude_cam
    pids = np.unique(ids[keep])
    cents = np.stack([emb[keep & (ids == p)].mean(axis=0) for p in pids]) if len(pids) else None
    return pids, cents


def evaluate_embeddings(q_emb, q_ids, q_cams, g_emb, g_ids, g_cams,
                        mode: str = "regular", camera_aware: bool = True,
                        return_rankings: bool = False):
    """mAP and Top-1 (percent) over all queries with a defined AP.

    ``mode='regular'`` ranks gallery instances after ``market_filter``.
    ``mode='centroid'`` ranks one centroid per gallery identity; with
    ``camera_aware`` each centroid omits samples from the query's camera.
    Queries without a relevant item are skipped.
    """
    q_emb = np.atleast_2d(np.asarray(q_emb, dtype=np.float64))
    g_emb = np.atleast_2d(np.asarray(g_emb, dtype=np.float64))
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    if mode not in ("regular", "centroid"):
        raise ValueError(f"mode must be 'regular' or 'centroid', got {mode!r}")
    if len(q_emb) == 0 or len(g_emb) == 0:
        raise ValueError("query and gallery sets must be non-empty")

    aps, top1, rankings = [], [], []
    if mode == "regular":
        dist = distance_matrix(q_emb, g_emb)
        for i in range(len(q_emb)):
            valid, rel = market_filter(q_ids[i], q_cams[i], g_ids, g_cams)
            if not rel.any():
                continue
            idx = np.flatnonzero(valid)
            r = rank_query(dist[i, idx], rel[idx])
            r.order = idx[r.order]
            aps.append(r.ap)
            top1.append(bool(r.relevance[0]))
            rankings.append(r)
    else:
        cache = {}
        for i in range(len(q_emb)):
            key = q_cams[i] if camera_aware else None
            if key not in cache:
                cache[key] = _centroids(g_emb, g_ids, g_cams, key)
            pids, cents = cache[key]
            if cents is None:
                continue
            rel = pids == q_ids[i]
            if not rel.any():
                continue
            r = rank_query(distance_matrix(q_emb[i], cents)[0], rel)
            r.order = pids[r.order]
            aps.append(r.ap)
            top1.append(bool(r.relevance[0]))
            rankings.append(r)
    if not aps:
        raise ValueError("no query has a relevant gallery item; cannot evaluate")
    score = RetrievalScore(100.0 * float(np.mean(aps)), 100.0 * float(np.mean(top1)), len(aps))
    return (score, rankings) if return_rankings else score


def evaluate(embed_fn, query_images, query_records, gallery_images, gallery_records,
             mode: str = "regular", camera_aware: bool = True) -> RetrievalScore:
    """Embed both sets with ``embed_fn`` (image stack -> embeddings) and score."""
    q = embed_fn(query_images)
    g = embed_fn(gallery_images)
    return evaluate_embeddings(
        q, [r.person_id for r in query_records], [r.camera_id for r in query_records],
        g, [r.person_id for r in gallery_records], [r.camera_id for r in gallery_records],
        mode=mode, camera_aware=camera_aware,
    )


@dataclass
class ReidRow:
    mode: str
    epsilon: str  # formatted number or "none"
    b: int
    c: int
    mAP: float
    top1: float
    camera_aware: bool = True
    delta_f: float = 0.0
    strict_delta_f: float = 0.0
    strict: bool = False
    seed: int = 0
    n_queries: int = 0


def write_reid_csv(rows, path=None) -> str:
    """CSV with the leading columns ``mode,epsilon,b,c,mAP,top1`` then metadata."""
    names = [f.name for f in fields(ReidRow)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for row in rows:
        d = asdict(row)
        d["mAP"] = f"{row.mAP:.4f}"
        d["top1"] = f"{row.top1:.4f}"
        d["delta_f"] = f"{row.delta_f:.0f}" if float(row.delta_f).is_integer() else repr(row.delta_f)
        d["strict_delta_f"] = f"{row.strict_delta_f:.0f}"
        w.writerow([d[n] for n in names])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def render_reid_table(rows, caption: str) -> str:
    """Text table: one line per epsilon, regular and centroid mAP/Top-1 side by side."""
    by_eps = {}
    for r in rows:
        if r.mode == "regular" or r.camera_aware:
            by_eps.setdefault(r.epsilon, {})[r.mode] = r
    lines = [caption, f"{'':>8} | {'Regular':^17} | {'Centroid-based':^17}",
             f"{'Noise e':>8} | {'mAP%':>8} {'Top-1%':>8} | {'mAP%':>8} {'Top-1%':>8}",
             "-" * 50]
    for eps, modes in by_eps.items():
        cells = []
        for m in ("regular", "centroid"):
            r = modes.get(m)
            cells.append(f"{r.mAP:>7.1f}% {r.top1:>7.1f}%" if r else f"{'-':>8} {'-':>8}")
        lines.append(f"{eps:>8} | {cells[0]} | {cells[1]}")
    return "\n".join(lines) + "\n"
