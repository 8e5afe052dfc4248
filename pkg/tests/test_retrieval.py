import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpreid.retrieval import (
    REID_HEADER,
    ReidRow,
    average_precision,
    distance_matrix,
    evaluate,
    evaluate_embeddings,
    market_filter,
    rank_query,
    render_reid_table,
    write_reid_csv,
)
from oracles import brute_force_scores, precision_ap


def test_distance_examples():
    assert distance_matrix([[1.0, 2.0]], [[1.0, 2.0]]).tolist() == [[0.0]]
    assert distance_matrix([[0.0, 0.0]], [[3.0, 4.0]]).tolist() == [[5.0]]
    with pytest.raises(ValueError):
        distance_matrix([[0.0, 0.0]], [[1.0, 2.0, 3.0]])


def test_distance_matches_double_loop():
    rng = np.random.default_rng(0)
    Q, G = rng.normal(size=(5, 6)), rng.normal(size=(7, 6))
    ref = [[math.dist(q, g) for g in G] for q in Q]
    assert np.allclose(distance_matrix(Q, G), ref, rtol=0, atol=1e-10)


def test_market_filter_example():
    valid, rel = market_filter(5, 1, [5, 5, 7], [1, 2, 1])
    assert valid.tolist() == [False, True, True]
    assert rel.tolist() == [False, True, False]


def test_average_precision_examples():
    assert average_precision([1]) == 1.0
    assert average_precision([1, 0, 1]) == pytest.approx(5 / 6)
    with pytest.raises(ValueError):
        average_precision([0, 0])


@settings(max_examples=200)
@given(st.lists(st.booleans(), min_size=1, max_size=10).filter(any))
def test_average_precision_matches_definition(flags):
    assert average_precision(flags) == pytest.approx(precision_ap(flags), abs=1e-12)


@settings(max_examples=200)
@given(st.lists(st.booleans(), min_size=2, max_size=12).filter(any), st.data())
def test_moving_relevant_item_earlier_never_hurts(flags, data):
    rel = [i for i, f in enumerate(flags) if f]
    irr = [i for i, f in enumerate(flags) if not f]
    if not irr:
        return
    i = data.draw(st.sampled_from(rel))
    j = data.draw(st.sampled_from([k for k in irr if k < i] or [None]))
    if j is None:
        return
    moved = list(flags)
    moved[i], moved[j] = moved[j], moved[i]
    assert average_precision(moved) >= average_precision(flags)


def test_rank_query_ties_keep_original_order():
    r = rank_query([1.0, 0.5, 1.0, 0.5], [False, False, True, True])
    assert r.order.tolist() == [1, 3, 0, 2]
    assert r.relevance.tolist() == [False, True, False, True]
    assert r.ap == pytest.approx((1 / 2 + 2 / 4) / 2)


def test_duplicate_embeddings_score_perfectly():
    rng = np.random.default_rng(1)
    ids = np.arange(6)
    q = rng.normal(size=(6, 4)) * 10
    for mode in ("regular", "centroid"):
        s = evaluate_embeddings(q, ids, np.ones(6, int), q.copy(), ids, np.full(6, 2), mode=mode)
        assert (s.mAP, s.top1, s.n_queries) == (100.0, 100.0, 6)


def test_centroid_hand_case():
    # query of id 1 at the origin; id 1 gallery at (2,0),(4,0) -> centroid (3,0);
    # id 2 gallery at (0,1),(0,3) -> centroid (0,2) which is closer
    g = [[2, 0], [4, 0], [0, 1], [0, 3]]
    s, ranks = evaluate_embeddings([[0, 0]], [1], [1], g, [1, 1, 2, 2], [2, 2, 2, 2],
                                   mode="centroid", return_rankings=True)
    assert ranks[0].order.tolist() == [2, 1]
    assert s.mAP == pytest.approx(50.0)
    assert s.top1 == 0.0


def test_camera_aware_centroids_drop_query_camera():
    # the same-camera sample of id 1 sits on the query; excluding it flips the ranking
    g = [[0, 0], [10, 0], [6, 0]]  # id 1 centroid: (10,0) aware, (5,0) blind
    ids, cams = [1, 1, 2], [1, 2, 2]
    aware = evaluate_embeddings([[0, 0]], [1], [1], g, ids, cams, mode="centroid")
    blind = evaluate_embeddings([[0, 0]], [1], [1], g, ids, cams, mode="centroid", camera_aware=False)
    assert aware.top1 == 0.0
    assert blind.top1 == 100.0


def test_queries_without_relevant_items_are_skipped():
    g = [[0, 0], [1, 1], [2, 2]]
    s = evaluate_embeddings([[0, 0], [5, 5]], [1, 9], [1, 1], g, [1, 1, 2], [1, 2, 2])
    assert s.n_queries == 1
    with pytest.raises(ValueError, match="no query"):
        evaluate_embeddings([[0, 0]], [9], [1], g, [1, 1, 2], [1, 2, 2])
    with pytest.raises(ValueError):
        evaluate_embeddings([[0, 0]], [1], [1], g, [1, 1, 2], [1, 2, 2], mode="other")


def _random_config(seed):
    rng = np.random.default_rng(seed)
    n_g = int(rng.integers(4, 21))
    n_ids, n_cams = int(rng.integers(2, 6)), int(rng.integers(2, 4))
    g_ids = rng.integers(0, n_ids, n_g)
    g_cams = rng.integers(1, n_cams + 1, n_g)
    n_q = int(rng.integers(1, 8))
    q_ids = rng.integers(0, n_ids, n_q)
    q_cams = rng.integers(1, n_cams + 1, n_q)
    D = int(rng.integers(2, 6))
    return rng.normal(size=(n_q, D)), q_ids, q_cams, rng.normal(size=(n_g, D)), g_ids, g_cams


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("mode, aware", [("regular", True), ("centroid", True), ("centroid", False)])
def test_pipeline_matches_brute_force(seed, mode, aware):
    q, qi, qc, g, gi, gc = _random_config(seed)
    try:
        ref = brute_force_scores(q, qi, qc, g, gi, gc, mode, aware)
    except ZeroDivisionError:
        with pytest.raises(ValueError):
            evaluate_embeddings(q, qi, qc, g, gi, gc, mode=mode, camera_aware=aware)
        return
    s = evaluate_embeddings(q, qi, qc, g, gi, gc, mode=mode, camera_aware=aware)
    assert abs(s.mAP - ref[0]) < 1e-10
    assert abs(s.top1 - ref[1]) < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_metrics_invariant_under_isometry(seed):
    q, qi, qc, g, gi, gc = _random_config(seed + 100)
    qi[:] = gi[0]
    qc[:] = 99  # every query has relevant items on other cameras
    rng = np.random.default_rng(seed)
    R, _ = np.linalg.qr(rng.normal(size=(q.shape[1],) * 2))
    t = rng.normal(size=q.shape[1]) * 5
    for mode in ("regular", "centroid"):
        a = evaluate_embeddings(q, qi, qc, g, gi, gc, mode=mode)
        b = evaluate_embeddings(q @ R.T + t, qi, qc, g @ R.T + t, gi, gc, mode=mode)
        assert a.mAP == pytest.approx(b.mAP, abs=1e-9)
        assert a.top1 == pytest.approx(b.top1, abs=1e-9)


def test_centroid_gallery_size():
    q, qi, qc, g, gi, gc = _random_config(7)
    qi[:] = gi[0]
    qc[:] = 99
    _, ranks = evaluate_embeddings(q, qi, qc, g, gi, gc, mode="centroid", return_rankings=True)
    assert all(len(r.order) == len(set(gi.tolist())) for r in ranks)


def test_evaluate_with_embed_function():
    from dpreid.dataset import PersonRecord

    imgs = np.zeros((2, 4, 4, 3), np.uint8)
    imgs[1] += 200
    q = [PersonRecord("a", 1, 1, "query"), PersonRecord("b", 2, 1, "query")]
    gal = [PersonRecord("c", 1, 2, "gallery"), PersonRecord("d", 2, 2, "gallery")]
    s = evaluate(lambda X: X.reshape(len(X), -1).astype(float), imgs, q, imgs, gal)
    assert s.mAP == 100.0


def test_report_csv_and_table():
    rows = [ReidRow("regular", "1", 2, 32, 12.3456, 50.0, True, 702464, 1376256, False, 0, 10),
            ReidRow("centroid", "1", 2, 32, 99.0, 100.0, True, 702464, 1376256, False, 0, 10)]
    text = write_reid_csv(rows)
    lines = text.splitlines()
    assert lines[0].split(",")[:6] == REID_HEADER == ["mode", "epsilon", "b", "c", "mAP", "top1"]
    assert lines[1].startswith("regular,1,2,32,12.3456,50.0000,True,702464,1376256,False,0,10")
    table = render_reid_table(rows, "caption delta_f=702464")
    assert table.splitlines()[0] == "caption delta_f=702464"
    assert "12.3%" in table and "99.0%" in table
