import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geogrouse.grouping import (
    assign,
    e_step,
    kmeans_fit,
    lloyd,
    proto_log_likelihood,
    proto_log_likelihood_grad,
    sse,
)
from geogrouse.numerics import ParamStore, cosine_matrix
from geogrouse.policy import Dense, Discrete, ModelConfig


def _store(**arrays):
    s = ParamStore()
    for k, v in arrays.items():
        s.add(k, v)
    return s


def best_two_partition(points):
    """Exhaustive minimum-SSE split into two nonempty clusters."""
    n = len(points)
    best = (np.inf, None)
    for mask in itertools.product([0, 1], repeat=n - 1):
        labels = np.array((0,) + mask)
        if labels.min() == labels.max():
            continue
        cents = np.array([points[labels == k].mean(axis=0) for k in (0, 1)])
        best = min(best, (sse(points, cents, labels), tuple(labels)), key=lambda t: t[0])
    return best


def test_kmeans_two_pairs():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
    c = kmeans_fit(pts, 2, seed=0)
    got = sorted(map(tuple, c))
    assert got == [(0.0, 0.5), (10.0, 10.5)]
    best, _ = best_two_partition(pts)
    assert sse(pts, c, np.argmin(((pts[:, None] - c[None]) ** 2).sum(-1), axis=1)) == pytest.approx(best)


@pytest.mark.parametrize("seed", range(10))
def test_kmeans_matches_exhaustive_oracle_on_separated_blobs(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(2, 6)
    pts = np.concatenate([rng.normal(0, 0.3, size=(n, 2)), rng.normal(8, 0.3, size=(9 - n, 2))])
    c = kmeans_fit(pts, 2, seed=seed)
    labels = np.argmin(((pts[:, None] - c[None]) ** 2).sum(-1), axis=1)
    best, _ = best_two_partition(pts)
    assert sse(pts, c, labels) == pytest.approx(best, rel=1e-12)


def test_kmeans_k1_is_global_mean():
    pts = np.random.default_rng(0).normal(size=(30, 3))
    assert np.allclose(kmeans_fit(pts, 1), pts.mean(axis=0), atol=1e-14)


def test_kmeans_k_equals_n():
    pts = np.random.default_rng(1).normal(size=(6, 2))
    c = kmeans_fit(pts, 6, seed=3)
    labels = np.argmin(((pts[:, None] - c[None]) ** 2).sum(-1), axis=1)
    assert sse(pts, c, labels) == 0.0
    assert sorted(map(tuple, c)) == sorted(map(tuple, pts))


def test_kmeans_too_few_points():
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((2, 3)), 3)


def test_lloyd_reseeds_empty_cluster():
    pts = np.array([[0.0], [1.0], [2.0], [10.0]])
    cents, labels = lloyd(pts, np.array([[1.0], [100.0]]), 10)
    assert set(labels.tolist()) == {0, 1}


@pytest.mark.parametrize("seed", range(100))
def test_lloyd_sse_non_increasing(seed):
    rng = np.random.default_rng(seed)
    n, d, K = rng.integers(5, 60), rng.integers(1, 6), rng.integers(2, 6)
    pts = rng.normal(size=(n, d)) * rng.uniform(0.5, 3.0, size=d)
    history = []
    kmeans_fit(pts, int(K), max_iters=100, seed=seed, history=history)
    assert len(history) >= 2
    assert all(b <= a for a, b in zip(history, history[1:]))


def test_assign_examples():
    cfg = ModelConfig(variant="kmeans")
    store = _store(**{"grp.centroids": np.array([[0.0, 0.0], [10.0, 10.0]])})
    assert assign([1.0, 1.0], store, cfg) == Discrete(0)
    assert assign([5.0, 5.0], store, cfg) == Discrete(0)
    assert assign([9.0, 8.0], store, cfg) == Discrete(1)

    can = ModelConfig(variant="can")
    store = _store(**{"grp.L": np.eye(5)})
    g = np.random.default_rng(0).normal(size=5)
    h = assign(g, store, can)
    assert isinstance(h, Dense) and np.array_equal(h.h, g)


def test_proto_assign_zero_norm_raises():
    store = _store(**{"grp.prototypes": np.eye(3)})
    with pytest.raises(ValueError):
        assign(np.zeros(3), store, ModelConfig(variant="proto"))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 100.0))
def test_proto_assign_scale_invariant(seed, alpha):
    rng = np.random.default_rng(seed)
    store = _store(**{"grp.prototypes": rng.normal(size=(4, 6))})
    cfg = ModelConfig(variant="proto")
    g = rng.normal(size=6)
    assert assign(g, store, cfg) == assign(2.0 * g, store, cfg)
    assert assign(g, store, cfg) == assign(alpha * g, store, cfg)


def test_assign_is_deterministic():
    rng = np.random.default_rng(2)
    store = _store(**{"grp.centroids": rng.normal(size=(3, 4))})
    g = rng.normal(size=4)
    cfg = ModelConfig(variant="kmeans")
    assert all(assign(g, store, cfg) == assign(g, store, cfg) for _ in range(5))


def test_kmeans_e_step_fixed_point():
    rng = np.random.default_rng(3)
    G = np.concatenate([rng.normal(c, 0.5, size=(20, 4)) for c in (-3, 0, 3)])
    cents = kmeans_fit(G, 3, max_iters=100, seed=0)
    store = _store(**{"grp.centroids": cents.copy()})
    e_step(G, store, ModelConfig(variant="kmeans", kmeans_max_iters=100))
    assert np.array_equal(store["grp.centroids"], cents)


def test_e_step_empty_batch():
    store = _store(**{"grp.L": np.eye(3)})
    with pytest.raises(ValueError):
        e_step(np.zeros((0, 3)), store, ModelConfig(variant="can"))


def test_can_e_step_is_noop():
    L = np.random.default_rng(4).normal(size=(76, 40))
    store = _store(**{"grp.L": L.copy()})
    assert e_step(np.random.default_rng(5).normal(size=(10, 40)), store, ModelConfig(variant="can")) == 0.0
    assert np.array_equal(store["grp.L"], L)


def test_proto_e_step_on_prototype_batch_raises_confidence():
    rng = np.random.default_rng(6)
    P = rng.normal(size=(3, 5))
    G = np.repeat(P[:1], 8, axis=0)
    store = _store(**{"grp.prototypes": P.copy()})
    cfg = ModelConfig(variant="proto", temperature=0.1)
    q0 = np.exp(proto_log_likelihood(G, P, 0.1, np.zeros(8, dtype=int)))
    e_step(G, store, cfg, step_size=1e-3)
    q1 = np.exp(proto_log_likelihood(G, store["grp.prototypes"], 0.1, np.zeros(8, dtype=int)))
    assert q1 >= q0


@pytest.mark.parametrize("seed", range(10))
def test_proto_likelihood_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    G, P = rng.normal(size=(12, 5)), rng.normal(size=(3, 5))
    k = np.argmax(cosine_matrix(G, P), axis=1)
    grad = proto_log_likelihood_grad(G, P, 0.1, k)
    eps = 1e-6
    for idx in np.ndindex(P.shape):
        Pp, Pm = P.copy(), P.copy()
        Pp[idx] += eps
        Pm[idx] -= eps
        num = (proto_log_likelihood(G, Pp, 0.1, k) - proto_log_likelihood(G, Pm, 0.1, k)) / (2 * eps)
        assert abs(num - grad[idx]) <= 1e-6 * max(1.0, abs(num))


@pytest.mark.parametrize("seed", range(20))
def test_proto_e_step_never_decreases_likelihood(seed):
    rng = np.random.default_rng(1000 + seed)
    G = rng.normal(size=(rng.integers(5, 50), 40))
    P = rng.normal(size=(3, 40))
    store = _store(**{"grp.prototypes": P.copy()})
    cfg = ModelConfig(variant="proto")
    k = np.argmax(cosine_matrix(G, P), axis=1)
    before = proto_log_likelihood(G, P, cfg.temperature, k)
    after = e_step(G, store, cfg, step_size=1e-3)
    assert after >= before - 1e-9
    assert np.array_equal(store["grp.prototypes"].shape, P.shape)
