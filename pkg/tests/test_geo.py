import numpy as np
import pytest

from geogrouse.geo import (
    GeoContext,
    State,
    StateBatch,
    aoi_at_level,
    encode_geo,
    encode_geo_backward,
    encode_geo_batch,
    encode_state,
)
from geogrouse.numerics import grad_check
from geogrouse.training import random_states

from conftest import make_policy

CTX = GeoContext(city_id=1, gps_cell_id=4, aoi_path=(0, 1, 2, 5, 11), hour=7, season=2)
SLICES = {"city": slice(0, 8), "gps": slice(8, 16), "aoi": slice(16, 32), "hour": slice(32, 36), "season": slice(36, 40)}


def test_aoi_at_level():
    path = [3, 14, 159, 2653, 58979]
    assert aoi_at_level(path, 3) == 159
    assert aoi_at_level(path, 1) == 3
    assert aoi_at_level(path, 5) == 58979
    for bad in (0, 6):
        with pytest.raises(ValueError):
            aoi_at_level(path, bad)


def test_geo_context_needs_five_levels():
    with pytest.raises(ValueError):
        GeoContext(0, 0, (0, 1, 2), 0, 0)


def test_encode_geo_zero_tables():
    store = make_policy().store
    for name in ("city", "gps", "aoi", "hour", "season"):
        store.params[f"emb.{name}"][...] = 0.0
    g = encode_geo(CTX, store, 3)
    assert g.shape == (40,) and not g.any()


def test_encode_geo_hour_locality():
    store = make_policy().store
    g1 = encode_geo(CTX, store, 3)
    g2 = encode_geo(GeoContext(1, 4, (0, 1, 2, 5, 11), 8, 2), store, 3)
    diff = np.flatnonzero(g1 != g2)
    assert diff.size and diff.min() >= 32 and diff.max() < 36


def test_encode_geo_matches_lookup():
    store = make_policy(seed=3).store
    rng = np.random.default_rng(3)
    for _ in range(10):
        ctx = GeoContext(int(rng.integers(2)), int(rng.integers(6)),
                         (0, int(rng.integers(2)), int(rng.integers(3)), 0, 0), int(rng.integers(24)), int(rng.integers(4)))
        expected = np.concatenate([
            store["emb.city"][ctx.city_id], store["emb.gps"][ctx.gps_cell_id], store["emb.aoi"][ctx.aoi_path[2]],
            store["emb.hour"][ctx.hour], store["emb.season"][ctx.season]])
        assert np.array_equal(encode_geo(ctx, store, 3), expected)


def test_encode_geo_bad_id_names_feature():
    store = make_policy().store
    with pytest.raises(ValueError, match="season"):
        encode_geo(GeoContext(1, 4, (0, 1, 2, 5, 11), 7, 9), store, 3)
    with pytest.raises(ValueError, match="aoi"):
        encode_geo(GeoContext(1, 4, (0, 1, 7, 5, 11), 7, 1), store, 3)


def test_aoi_level_only_changes_the_aoi_slice():
    from geogrouse.policy import ModelConfig, build_params
    from geogrouse.training import check_vocab

    vocab = check_vocab()
    s3 = build_params(ModelConfig(aoi_level=3), vocab, np.random.default_rng(0))
    s5 = build_params(ModelConfig(aoi_level=5), vocab, np.random.default_rng(0))
    assert s3["emb.aoi"].shape[0] == vocab.aoi_sizes[2]
    assert s5["emb.aoi"].shape[0] == vocab.aoi_sizes[4]
    s5.params["emb.aoi"][: vocab.aoi_sizes[2]] = s3["emb.aoi"]
    for name in ("city", "gps", "hour", "season"):
        s5.params[f"emb.{name}"][...] = s3[f"emb.{name}"]
    g3, g5 = encode_geo(CTX, s3, 3), encode_geo(CTX, s5, 5)
    assert g3.shape == g5.shape
    for name, sl in SLICES.items():
        if name != "aoi":
            assert np.array_equal(g3[sl], g5[sl])


@pytest.mark.parametrize("seed", range(20))
def test_encode_geo_gradient(seed):
    rng = np.random.default_rng(seed)
    policy = make_policy(seed=seed)
    store = policy.store
    batch = random_states(policy.vocab, 5, 3, rng)
    w = rng.normal(size=(5, 40))
    names = [f"emb.{n}" for n in ("city", "gps", "aoi", "hour", "season")]

    def f(s):
        G = encode_geo_batch(batch, s, 3)
        encode_geo_backward(w, batch, s, 3)
        return float(np.sum(w * G))

    assert grad_check(f, store, 1e-5, names=names) < 1e-4
    store.zero_grads()
    f(store)
    used = set(batch.hour.tolist())
    for row in range(store["emb.hour"].shape[0]):
        if row not in used:
            assert not store.grads["emb.hour"][row].any()


def test_encode_state_edges():
    store = make_policy(seed=1).store
    empty = State((0, 1), (), CTX)
    prof, seq, g = encode_state(empty, store, 3, 10)
    assert seq.shape == (0, 8)
    assert prof.shape == (8,) and g.shape == (40,)

    one = State((0, 1), ((5, 2),), CTX)
    _, seq1, _ = encode_state(one, store, 3, 10)
    assert seq1.shape == (1, 8)
    assert np.array_equal(seq1[0], store["emb.item"][5] + store["emb.category"][2])

    moved = State((0, 1), ((5, 2),), GeoContext(0, 1, (0, 0, 1, 2, 3), 23, 0))
    p2, s2, g2 = encode_state(moved, store, 3, 10)
    p1, _, g1 = encode_state(one, store, 3, 10)
    assert np.array_equal(p1, p2) and np.array_equal(seq1, s2)
    assert not np.array_equal(g1, g2)


def test_encode_state_rejects_bad_item():
    store = make_policy().store
    with pytest.raises(ValueError, match="item"):
        encode_state(State((0, 1), ((99, 0),), CTX), store, 3, 10)


def test_state_batch_round_trip():
    from geogrouse.training import check_vocab

    batch = random_states(check_vocab(), 7, 4, np.random.default_rng(0))
    back = StateBatch.from_states(batch.to_states(), 4)
    for k, v in batch.__dict__.items():
        assert np.array_equal(v, back.__dict__[k]), k
