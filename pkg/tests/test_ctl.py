import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from dpreid.ctl import (
    CentroidEmbedder,
    CtlConfig,
    TrainingDivergedError,
    batch_ctl,
    centroid,
    ctl_gradients,
    ctl_loss,
    sample_batches,
    train,
)
from dpreid.embedding import LinearEmbedder

vectors = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 5)),
                 elements=st.floats(-1e3, 1e3))


def test_centroid_examples():
    assert centroid([[1.5, -2.0]]).values.tolist() == [1.5, -2.0]
    c = centroid([[0, 0], [2, 4]], class_id=7)
    assert c.values.tolist() == [1.0, 2.0]
    assert (c.class_id, c.support_count) == (7, 2)
    with pytest.raises(ValueError):
        centroid(np.zeros((0, 3)))


def test_centroid_matches_shuffled_sum():
    rng = np.random.default_rng(0)
    V = rng.normal(size=(50, 8))
    perm = rng.permutation(50)
    ref = [sum(V[i, d] for i in perm) / 50 for d in range(8)]
    assert np.allclose(centroid(V).values, ref, rtol=0, atol=1e-12)


@settings(max_examples=50)
@given(vectors, st.floats(-100, 100))
def test_centroid_permutation_and_translation(V, t):
    c = centroid(V).values
    assert np.allclose(centroid(V[::-1]).values, c, atol=1e-9)
    assert np.allclose(centroid(V + t).values, c + t, atol=1e-9)


def test_loss_examples():
    assert ctl_loss([0, 0], [1, 0], [0, 2], 0.3) == 0.0
    assert ctl_loss([0, 0], [3, 0], [1, 0], 0.5) == 8.5
    assert ctl_loss([1, 2], [4, 4], [4, 4], 0.3) == 0.3
    with pytest.raises(ValueError):
        ctl_loss([0, 0], [1, 0, 0], [0, 2], 0.3)


@settings(max_examples=100)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.floats(0, 5))
def test_loss_hinge_properties(M, margin):
    a, p, n = M
    loss = ctl_loss(a, p, n, margin)
    assert loss >= 0
    # same association as the loss; d_p + margin can round down to d_p
    if np.sum((a - p) ** 2) - np.sum((a - n) ** 2) + margin <= 0:
        assert loss == 0


def test_gradient_examples():
    g = ctl_gradients([0, 0], [[1, 0]], [[0, 2]], 0.3)
    assert not g.anchor.any() and not g.positive.any() and not g.negative.any()
    g = ctl_gradients([0, 0], [[3, 0]], [[1, 0]], 0.5)
    assert g.anchor.tolist() == [-4.0, 0.0]
    assert g.positive.tolist() == [[6.0, 0.0]]
    assert g.negative.tolist() == [[-2.0, 0.0]]


def _rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def _instance(seed):
    """Random anchor and supports; every fourth case sits 1e-3 either side of the hinge."""
    rng = np.random.default_rng(seed)
    D = int(rng.integers(2, 6))
    a = rng.normal(size=D)
    SP = rng.normal(size=(int(rng.integers(1, 5)), D))
    SN = rng.normal(size=(int(rng.integers(1, 5)), D)) + 3.0
    margin = float(rng.uniform(0, 1))
    if seed % 4 == 0:
        raw = np.sum((a - SP.mean(0)) ** 2) - np.sum((a - SN.mean(0)) ** 2)
        margin = -raw + (1e-3 if seed % 8 == 0 else -1e-3)
    return a, SP, SN, margin


@pytest.mark.parametrize("seed", range(24))
def test_single_anchor_gradients_match_finite_differences(seed):
    a, SP, SN, margin = _instance(seed)
    assert margin >= 0
    g = ctl_gradients(a, SP, SN, margin)

    def L(a_, SP_, SN_):
        return ctl_loss(a_, SP_.mean(0), SN_.mean(0), margin)

    assert _rel_err(g.anchor, _fd(lambda x: L(x, SP, SN), a)) < 1e-4
    assert _rel_err(g.positive, _fd(lambda x: L(a, x, SN), SP)) < 1e-4
    assert _rel_err(g.negative, _fd(lambda x: L(a, SP, x), SN)) < 1e-4


def _batch(seed, n_classes=3, k=3, D=4):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes) * 10 + 1, k)
    E = rng.normal(size=(n_classes * k, D)) + np.repeat(rng.normal(scale=1.5, size=(n_classes, D)), k, 0)
    return E, labels


@pytest.mark.parametrize("seed", range(20))
def test_batch_gradient_matches_finite_differences(seed):
    E, labels = _batch(seed)
    loss, grad = batch_ctl(E, labels, 0.5)
    fd = _fd(lambda X: batch_ctl(X, labels, 0.5)[0], E)
    assert loss >= 0
    assert _rel_err(grad, fd) < 1e-4


def test_batch_loss_against_explicit_loop():
    E, labels = _batch(3, n_classes=4, k=2)
    total = 0.0
    for i in range(len(E)):
        mates = [j for j in range(len(E)) if labels[j] == labels[i] and j != i]
        cp = E[mates].mean(0)
        negs = {k: E[labels == k].mean(0) for k in set(labels) if k != labels[i]}
        cn = min(negs.values(), key=lambda c: np.sum((E[i] - c) ** 2))
        total += ctl_loss(E[i], cp, cn, 0.3)
    assert batch_ctl(E, labels, 0.3)[0] == pytest.approx(total / len(E), rel=1e-12)


def test_batch_ctl_random_negative_and_errors():
    E, labels = _batch(1)
    loss, grad = batch_ctl(E, labels, 0.3, "random", np.random.default_rng(0))
    assert loss >= 0 and grad.shape == E.shape
    with pytest.raises(ValueError):
        batch_ctl(E, np.zeros(len(E)), 0.3)
    with pytest.raises(ValueError):
        batch_ctl(E[:4], [0, 0, 0, 1], 0.3)


def test_sample_batches_shape_and_coverage():
    labels = np.repeat([4, 7, 9, 12], 3)
    batches = sample_batches(labels, P=2, K=2, seed=0)
    assert len(batches) == 2
    seen = set()
    for b in batches:
        assert len(b) == 4
        vals, counts = np.unique(labels[b], return_counts=True)
        assert counts.tolist() == [2, 2]
        seen |= set(vals.tolist())
    assert seen == {4, 7, 9, 12}


@settings(max_examples=30)
@given(st.integers(2, 9), st.integers(2, 4), st.integers(2, 4), st.integers(0, 1000))
def test_sample_batches_cover_every_class(n_classes, P, K, seed):
    P = min(P, n_classes)
    labels = np.repeat(np.arange(n_classes), 3)
    batches = sample_batches(labels, P, K, seed)
    assert set(np.concatenate([labels[b] for b in batches]).tolist()) == set(range(n_classes))
    assert all(len(b) == P * K for b in batches)
    again = sample_batches(labels, P, K, seed)
    assert all(np.array_equal(x, y) for x, y in zip(batches, again))


def test_sample_batches_with_replacement_and_errors():
    labels = np.array([0, 1, 1, 1, 2, 2])
    for b in sample_batches(labels, P=3, K=3, seed=1):
        assert np.unique(labels[b], return_counts=True)[1].tolist() == [3, 3, 3]
    with pytest.raises(ValueError):
        sample_batches(labels, P=4, K=2)


@pytest.mark.parametrize("kwargs", [dict(P=1), dict(K=1), dict(margin=-1), dict(negative="easy"),
                                    dict(lr=-0.1)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        CtlConfig(**kwargs)


def _two_ids(seed=0, n=8, F=24):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(0, 0.1, (n, F)) + 1.0, rng.normal(0, 0.1, (n, F)) - 1.0])
    return X, np.repeat([1, 2], n)


def test_training_reduces_loss():
    X, y = _two_ids()
    init = LinearEmbedder(np.random.default_rng(1).normal(0, 0.05, (4, 24)), 1, 8)
    _, trace = train(init, X, y, CtlConfig(margin=1.0, P=2, K=4, lr=0.05, epochs=5))
    assert len(trace) == 5
    assert trace[-1] < trace[0]


def test_zero_learning_rate_keeps_weights():
    X, y = _two_ids()
    init = LinearEmbedder.random(4, 1, 8, seed=3)
    model, _ = train(init, X, y, CtlConfig(P=2, K=4, lr=0.0, epochs=3))
    assert np.array_equal(model.weights, init.weights)
    assert model is not init


def test_margin_zero_identical_views_gives_zero_loss():
    base = np.random.default_rng(4).random((3, 24))
    X = np.repeat(base, 4, axis=0)  # each identity looks the same in every view
    y = np.repeat([0, 1, 2], 4)
    _, trace = train(LinearEmbedder.random(4, 1, 8, seed=0), X, y,
                     CtlConfig(margin=0.0, P=2, K=2, lr=0.1, epochs=3))
    assert trace[-1] == 0.0


def test_training_is_deterministic():
    X, y = _two_ids(seed=5)
    cfg = CtlConfig(P=2, K=3, epochs=4, seed=9)
    m1, t1 = train(LinearEmbedder.random(4, 1, 8), X, y, cfg)
    m2, t2 = train(LinearEmbedder.random(4, 1, 8), X, y, cfg)
    assert t1 == t2
    assert np.array_equal(m1.weights, m2.weights)


def test_divergence_is_reported():
    X, y = _two_ids()
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError, match="learning rate"):
        train(LinearEmbedder.random(4, 1, 8), X * 1e200, y, CtlConfig(P=2, K=4, lr=1.0, epochs=5))


def test_estimator_api():
    X, y = _two_ids()
    est = CentroidEmbedder(dim=3, grid=1, bins=8, P=2, K=4, epochs=2)
    Z = est.fit(X, y).transform(X)
    assert Z.shape == (16, 3)
    assert len(est.loss_trace_) == 2
    assert clone(est).get_params() == est.get_params()
    imgs = np.random.default_rng(0).integers(0, 256, (8, 8, 8, 3), dtype=np.uint8)
    est2 = CentroidEmbedder(dim=3, grid=2, bins=4, P=2, K=2, epochs=1).fit(imgs, np.repeat([0, 1], 4))
    assert est2.transform(imgs).shape == (8, 3)
