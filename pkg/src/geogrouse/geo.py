"""Spatiotemporal feature encoding: geo embedding g and the state parts fed to DIN."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ParamStore, scatter_add

AOI_LEVELS = 5
GEO_FEATURES = ("city", "gps", "aoi", "hour", "season")


@dataclass(frozen=True)
class GeoContext:
    city_id: int
    gps_cell_id: int
    aoi_path: tuple[int, ...]
    hour: int
    season: int

    def __post_init__(self):
        if len(self.aoi_path) != AOI_LEVELS:
            raise ValueError(f"aoi_path must have {AOI_LEVELS} levels, got {len(self.aoi_path)}")


@dataclass(frozen=True)
class State:
    user_profile_ids: tuple[int, ...]
    behavior_seq: tuple[tuple[int, int], ...]
    geo: GeoContext


@dataclass(frozen=True)
class Vocab:
    """Vocabulary sizes fixed by the environment; the model's embedding tables follow them."""

    n_items: int
    n_categories: int
    n_cities: int
    n_gps_cells: int
    aoi_sizes: tuple[int, ...]
    profile_sizes: tuple[int, ...]
    n_hours: int = 24
    n_seasons: int = 4

    def item_category(self) -> np.ndarray:
        # items are assigned to categories round-robin
        return np.arange(self.n_items) % self.n_categories

    def geo_size(self, feature: str, aoi_level: int) -> int:
        return {
            "city": self.n_cities,
            "gps": self.n_gps_cells,
            "aoi": self.aoi_sizes[aoi_level - 1],
            "hour": self.n_hours,
            "season": self.n_seasons,
        }[feature]


def aoi_at_level(path, level: int) -> int:
    if not 1 <= level <= AOI_LEVELS:
        raise ValueError(f"AOI level must be in 1..{AOI_LEVELS}, got {level}")
    return int(path[level - 1])


@dataclass
class StateBatch:
    """Column-wise storage of n states; sequences are right-padded to max_seq_len."""

    profile: np.ndarray  # [n, F] int
    seq_items: np.ndarray  # [n, L] int
    seq_cats: np.ndarray  # [n, L] int
    seq_len: np.ndarray  # [n] int
    city: np.ndarray
    gps: np.ndarray
    aoi: np.ndarray  # [n, 5]
    hour: np.ndarray
    season: np.ndarray

    def __len__(self) -> int:
        return self.profile.shape[0]

    @property
    def seq_mask(self) -> np.ndarray:
        return np.arange(self.seq_items.shape[1])[None, :] < self.seq_len[:, None]

    @classmethod
    def from_states(cls, states, max_seq_len: int) -> "StateBatch":
        n = len(states)
        n_prof = len(states[0].user_profile_ids) if n else 0
        out = cls.empty(n, n_prof, max_seq_len)
        for i, s in enumerate(states):
            out.profile[i] = s.user_profile_ids
            seq = s.behavior_seq[-max_seq_len:] if max_seq_len else ()
            out.seq_len[i] = len(seq)
            for j, (item, cat) in enumerate(seq):
                out.seq_items[i, j] = item
                out.seq_cats[i, j] = cat
            g = s.geo
            out.city[i], out.gps[i], out.hour[i], out.season[i] = g.city_id, g.gps_cell_id, g.hour, g.season
            out.aoi[i] = g.aoi_path
        return out

    @classmethod
    def empty(cls, n: int, n_profile: int, max_seq_len: int) -> "StateBatch":
        z = lambda *shape: np.zeros(shape, dtype=np.int64)  # noqa: E731
        return cls(z(n, n_profile), z(n, max_seq_len), z(n, max_seq_len), z(n),
                   z(n), z(n), z(n, AOI_LEVELS), z(n), z(n))

    def to_states(self) -> list[State]:
        out = []
        for i in range(len(self)):
            L = int(self.seq_len[i])
            seq = tuple((int(a), int(c)) for a, c in zip(self.seq_items[i, :L], self.seq_cats[i, :L]))
            geo = GeoContext(int(self.city[i]), int(self.gps[i]), tuple(int(x) for x in self.aoi[i]),
                             int(self.hour[i]), int(self.season[i]))
            out.append(State(tuple(int(x) for x in self.profile[i]), seq, geo))
        return out

    def take(self, idx) -> "StateBatch":
        return StateBatch(**{k: v[idx] for k, v in self.__dict__.items()})

    @classmethod
    def concat(cls, batches) -> "StateBatch":
        keys = batches[0].__dict__.keys()
        return cls(**{k: np.concatenate([b.__dict__[k] for b in batches]) for k in keys})


def geo_ids(batch: StateBatch, aoi_level: int) -> dict[str, np.ndarray]:
    return {
        "city": batch.city,
        "gps": batch.gps,
        "aoi": batch.aoi[:, aoi_level - 1],
        "hour": batch.hour,
        "season": batch.season,
    }


def validate_ids(name: str, ids: np.ndarray, size: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= size):
        bad = ids.max() if ids.max() >= size else ids.min()
        raise ValueError(f"{name} id {int(bad)} outside vocabulary of size {size}")


def encode_geo_batch(batch: StateBatch, store: ParamStore, aoi_level: int) -> np.ndarray:
    """Concatenated city/gps/aoi/hour/season embeddings, shape [n, d_g]."""
    parts = []
    for feat, ids in geo_ids(batch, aoi_level).items():
        table = store[f"emb.{feat}"]
        validate_ids(feat, ids, table.shape[0])
        parts.append(table[ids])
    return np.concatenate(parts, axis=1)


def encode_geo_backward(dG: np.ndarray, batch: StateBatch, store: ParamStore, aoi_level: int) -> None:
    col = 0
    for feat, ids in geo_ids(batch, aoi_level).items():
        dim = store[f"emb.{feat}"].shape[1]
        scatter_add(store.grads[f"emb.{feat}"], ids, dG[:, col:col + dim])
        col += dim


def encode_geo(ctx: GeoContext, store: ParamStore, aoi_level: int) -> np.ndarray:
    batch = StateBatch.from_states([State((), (), ctx)], max_seq_len=0)
    return encode_geo_batch(batch, store, aoi_level)[0]


def item_embeddings(items: np.ndarray, cats: np.ndarray, store: ParamStore) -> np.ndarray:
    """An item's embedding is its own row plus its category's row."""
    validate_ids("item", items, store["emb.item"].shape[0])
    validate_ids("category", cats, store["emb.category"].shape[0])
    return store["emb.item"][items] + store["emb.category"][cats]


def item_embeddings_backward(dE: np.ndarray, items, cats, store: ParamStore) -> None:
    scatter_add(store.grads["emb.item"], items, dE)
    scatter_add(store.grads["emb.category"], cats, dE)


@dataclass
class EncodedStates:
    profile: np.ndarray  # [n, d_p]
    seq: np.ndarray  # [n, L, d_i], zero rows past seq_len
    mask: np.ndarray  # [n, L] bool
    g: np.ndarray  # [n, d_g]
    extras: dict = field(default_factory=dict)


def encode_profile(batch: StateBatch, store: ParamStore) -> np.ndarray:
    parts = []
    for f in range(batch.profile.shape[1]):
        table = store[f"emb.profile.{f}"]
        validate_ids(f"profile[{f}]", batch.profile[:, f], table.shape[0])
        parts.append(table[batch.profile[:, f]])
    if not parts:
        return np.zeros((len(batch), 0))
    return np.concatenate(parts, axis=1)


def encode_states(batch: StateBatch, store: ParamStore, aoi_level: int) -> EncodedStates:
    mask = batch.seq_mask
    seq = item_embeddings(np.where(mask, batch.seq_items, 0), np.where(mask, batch.seq_cats, 0), store)
    seq = seq * mask[..., None]
    return EncodedStates(encode_profile(batch, store), seq, mask, encode_geo_batch(batch, store, aoi_level))


def encode_states_backward(d_profile, d_seq, dG, batch: StateBatch, store: ParamStore, aoi_level: int) -> None:
    col = 0
    for f in range(batch.profile.shape[1]):
        dim = store[f"emb.profile.{f}"].shape[1]
        scatter_add(store.grads[f"emb.profile.{f}"], batch.profile[:, f], d_profile[:, col:col + dim])
        col += dim
    mask = batch.seq_mask
    item_embeddings_backward(d_seq[mask], batch.seq_items[mask], batch.seq_cats[mask], store)
    encode_geo_backward(dG, batch, store, aoi_level)


def encode_state(s: State, store: ParamStore, aoi_level: int, max_seq_len: int):
    """Single-state encoding: (profile_vec, seq_embs [L, d_i], g). L may be 0."""
    batch = StateBatch.from_states([s], max_seq_len)
    enc = encode_states(batch, store, aoi_level)
    L = int(batch.seq_len[0])
    return enc.profile[0], enc.seq[0, :L], enc.g[0]
