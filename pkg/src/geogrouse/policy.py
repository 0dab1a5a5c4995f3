"""Group-specific policy pi(a | s, h) = GS(DIN(s), h) over a candidate set.

All forward/backward passes work on batches; the single-sample helpers at the
bottom wrap them for a batch of one. Gradients are accumulated into the
ParamStore passed in, never applied here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geo
from .geo import StateBatch, Vocab
from .numerics import (
    ParamStore,
    ShapeError,
    log_softmax,
    masked_softmax,
    softmax,
    softmax_backward,
    tanh_backward,
)

VARIANTS = ("kmeans", "proto", "can", "none")


@dataclass
class ModelConfig:
    variant: str = "can"
    n_groups: int = 3
    micro_hidden: int = 4
    temperature: float = 0.1
    action_dim: int = 8
    att_hidden: int = 16
    fusion_hidden: int = 32
    profile_dim: int = 4
    city_dim: int = 8
    gps_dim: int = 8
    aoi_dim: int = 16
    hour_dim: int = 4
    season_dim: int = 4
    aoi_level: int = 3
    init_scale: float = 0.05
    kmeans_max_iters: int = 50
    proto_lr: float = 0.05

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_groups < 2 and self.variant in ("kmeans", "proto"):
            raise ValueError("discrete grouping needs n_groups >= 2")
        if not 1 <= self.aoi_level <= geo.AOI_LEVELS:
            raise ValueError(f"aoi_level must be in 1..5, got {self.aoi_level}")

    @property
    def geo_dim(self) -> int:
        return self.city_dim + self.gps_dim + self.aoi_dim + self.hour_dim + self.season_dim

    @property
    def micro_size(self) -> int:
        return micro_mlp_size(self.action_dim, self.micro_hidden)

    def geo_dims(self) -> dict[str, int]:
        return {"city": self.city_dim, "gps": self.gps_dim, "aoi": self.aoi_dim,
                "hour": self.hour_dim, "season": self.season_dim}


# ---------------------------------------------------------------- group indicator

@dataclass(frozen=True)
class Discrete:
    k: int


@dataclass(frozen=True)
class Dense:
    h: np.ndarray


# ---------------------------------------------------------------- micro-MLP packing

def micro_mlp_size(d_a: int, m: int) -> int:
    return d_a * m + m + m * d_a + d_a


def unpack_micro_mlp(v: np.ndarray, d_a: int, m: int):
    """Split packed parameters (last axis) into W1 [d_a,m], b1 [m], W2 [m,d_a], b2 [d_a]."""
    P = micro_mlp_size(d_a, m)
    if v.shape[-1] != P:
        raise ShapeError(f"packed micro-MLP vector has length {v.shape[-1]}, expected P={P}")
    lead = v.shape[:-1]
    o1, o2, o3 = d_a * m, d_a * m + m, d_a * m + m + m * d_a
    return (v[..., :o1].reshape(*lead, d_a, m), v[..., o1:o2],
            v[..., o2:o3].reshape(*lead, m, d_a), v[..., o3:])


def pack_micro_mlp(W1, b1, W2, b2) -> np.ndarray:
    lead = b2.shape[:-1]
    return np.concatenate([W1.reshape(*lead, -1), b1, W2.reshape(*lead, -1), b2], axis=-1)


def micro_mlp_forward(x, W1, b1, W2, b2):
    """Per-row weights: x [n,d_a], W1 [n,d_a,m] ... -> (y [n,d_a], hidden)."""
    hidden = np.tanh(np.einsum("bi,bij->bj", x, W1) + b1)
    return np.einsum("bj,bjk->bk", hidden, W2) + b2, hidden


def micro_mlp_backward(dy, x, hidden, W1, W2):
    """Returns (dx, dW1, db1, dW2, db2) with per-row weight gradients."""
    dW2 = hidden[:, :, None] * dy[:, None, :]
    dz = tanh_backward(np.einsum("bk,bjk->bj", dy, W2), hidden)
    dW1 = x[:, :, None] * dz[:, None, :]
    dx = np.einsum("bj,bij->bi", dz, W1)
    return dx, dW1, dz, dW2, dy


# ---------------------------------------------------------------- parameters

def build_params(cfg: ModelConfig, vocab: Vocab, rng: np.random.Generator) -> ParamStore:
    """Weights ~ U(-init_scale, init_scale), biases zero.

    Centroids / prototypes are placeholders here; they are fitted on an
    initial sample of g by the trainer.
    """
    s = cfg.init_scale
    store = ParamStore()
    U = lambda *shape: rng.uniform(-s, s, size=shape)  # noqa: E731
    d_i = cfg.action_dim
    for feat, dim in cfg.geo_dims().items():
        store.add(f"emb.{feat}", U(vocab.geo_size(feat, cfg.aoi_level), dim))
    for f, size in enumerate(vocab.profile_sizes):
        store.add(f"emb.profile.{f}", U(size, cfg.profile_dim))
    store.add("emb.item", U(vocab.n_items, d_i))
    store.add("emb.category", U(vocab.n_categories, d_i))

    d_p = cfg.profile_dim * len(vocab.profile_sizes)
    d_g = cfg.geo_dim
    store.add("din.query.W", U(d_p + d_g, d_i))
    store.add("din.query.b", np.zeros(d_i))
    store.add("din.att.W1", U(4 * d_i, cfg.att_hidden))
    store.add("din.att.b1", np.zeros(cfg.att_hidden))
    # no output bias: the softmax over the sequence is shift invariant
    store.add("din.att.W2", U(cfg.att_hidden, 1))
    store.add("din.fuse.W1", U(d_p + d_i + d_g, cfg.fusion_hidden))
    store.add("din.fuse.b1", np.zeros(cfg.fusion_hidden))
    store.add("din.fuse.W2", U(cfg.fusion_hidden, cfg.action_dim))
    store.add("din.fuse.b2", np.zeros(cfg.action_dim))

    K, m, d_a, P = cfg.n_groups, cfg.micro_hidden, cfg.action_dim, cfg.micro_size
    if cfg.variant == "kmeans":
        # identical towers, so any specialisation comes from routing alone
        store.add("gs.tower.W1", np.repeat(U(1, d_a, m), K, axis=0))
        store.add("gs.tower.b1", np.zeros((K, m)))
        store.add("gs.tower.W2", np.repeat(U(1, m, d_a), K, axis=0))
        store.add("gs.tower.b2", np.zeros((K, d_a)))
        store.add("grp.centroids", np.zeros((K, d_g)))
    elif cfg.variant == "proto":
        store.add("gs.proto.W", U(P, d_g))
        store.add("gs.proto.b", np.zeros(P))
        store.add("grp.prototypes", U(K, d_g))
    elif cfg.variant == "can":
        store.add("grp.L", U(P, d_g))
    return store


def phi_only_names(cfg: ModelConfig) -> list[str]:
    """Parameters updated exclusively by the E-step."""
    return ["grp.centroids"] if cfg.variant == "kmeans" else []


# ---------------------------------------------------------------- DIN tower

def _att_blocks(W1: np.ndarray, d: int):
    # unit input is [s, q, s*q, s-q]; split W1 into its four row blocks
    return W1[:d], W1[d:2 * d], W1[2 * d:3 * d], W1[3 * d:]


def din_forward(enc: geo.EncodedStates, store: ParamStore):
    """Shared tower: context-query attention over the behaviour sequence, then fusion MLP."""
    S, mask = enc.seq, enc.mask
    n, L, d = S.shape
    ctx = np.concatenate([enc.profile, enc.g], axis=1)
    Q = ctx @ store["din.query.W"] + store["din.query.b"]
    Ws, Wq, Wsq, Wd = _att_blocks(store["din.att.W1"], d)
    SQ = S * Q[:, None, :]
    Z1 = S @ (Ws + Wd) + SQ @ Wsq + (Q @ (Wq - Wd) + store["din.att.b1"])[:, None, :]
    H1 = np.tanh(Z1)
    U = (H1 @ store["din.att.W2"])[..., 0]
    w = masked_softmax(U, mask) if L else np.zeros((n, 0))
    V = np.einsum("bl,bld->bd", w, S)
    F = np.concatenate([enc.profile, V, enc.g], axis=1)
    Hf = np.tanh(F @ store["din.fuse.W1"] + store["din.fuse.b1"])
    A_s = Hf @ store["din.fuse.W2"] + store["din.fuse.b2"]
    cache = dict(enc=enc, ctx=ctx, Q=Q, SQ=SQ, H1=H1, w=w, F=F, Hf=Hf)
    return A_s, cache


def din_backward(dA_s: np.ndarray, cache: dict, store: ParamStore):
    """Returns (d_profile, d_seq, dG) and accumulates tower weight gradients."""
    enc = cache["enc"]
    S = enc.seq
    Q, SQ, H1, w, F, Hf = (cache[k] for k in ("Q", "SQ", "H1", "w", "F", "Hf"))
    d_p, d = enc.profile.shape[1], S.shape[2]
    gr = store.grads

    gr["din.fuse.W2"] += Hf.T @ dA_s
    gr["din.fuse.b2"] += dA_s.sum(axis=0)
    dZf = tanh_backward(dA_s @ store["din.fuse.W2"].T, Hf)
    gr["din.fuse.W1"] += F.T @ dZf
    gr["din.fuse.b1"] += dZf.sum(axis=0)
    dF = dZf @ store["din.fuse.W1"].T
    d_profile = dF[:, :d_p].copy()
    dV = dF[:, d_p:d_p + d]
    dG = dF[:, d_p + d:].copy()

    dS = w[:, :, None] * dV[:, None, :]
    dw = np.einsum("bld,bd->bl", S, dV)
    dU = softmax_backward(dw, w)
    W2 = store["din.att.W2"]
    gr["din.att.W2"] += np.einsum("blh,bl->h", H1, dU)[:, None]
    dZ1 = tanh_backward(dU[:, :, None] * W2[:, 0][None, None, :], H1)
    h = dZ1.shape[2]
    dZ1_flat = dZ1.reshape(-1, h)
    dZ1_sum = dZ1.sum(axis=1)  # [n, h]
    S_dZ = S.reshape(-1, d).T @ dZ1_flat
    Q_dZ = Q.T @ dZ1_sum
    Ws, Wq, Wsq, Wd = _att_blocks(store["din.att.W1"], d)
    gW1 = gr["din.att.W1"]
    gW1[:d] += S_dZ
    gW1[d:2 * d] += Q_dZ
    gW1[2 * d:3 * d] += SQ.reshape(-1, d).T @ dZ1_flat
    gW1[3 * d:] += S_dZ - Q_dZ
    gr["din.att.b1"] += dZ1_sum.sum(axis=0)
    dSQ = dZ1 @ Wsq.T
    dS = dS + dZ1 @ (Ws + Wd).T + dSQ * Q[:, None, :]
    dQ = dZ1_sum @ (Wq - Wd).T + (dSQ * S).sum(axis=1)

    gr["din.query.W"] += cache["ctx"].T @ dQ
    gr["din.query.b"] += dQ.sum(axis=0)
    dctx = dQ @ store["din.query.W"].T
    d_profile += dctx[:, :d_p]
    dG += dctx[:, d_p:]
    dS = dS * enc.mask[..., None]
    return d_profile, dS, dG


# ---------------------------------------------------------------- group-specific heads

def gs_forward(A_s, G, indicator, store: ParamStore, cfg: ModelConfig):
    """a = GS(a_s, h). ``indicator`` is k-hat [n] (kmeans/proto), H [n,P] (can) or None."""
    v = cfg.variant
    d_a, m = cfg.action_dim, cfg.micro_hidden
    if v == "none":
        return A_s, dict(variant=v)
    if v == "kmeans":
        k = _discrete(indicator, cfg)
        W1, b1 = store["gs.tower.W1"][k], store["gs.tower.b1"][k]
        W2, b2 = store["gs.tower.W2"][k], store["gs.tower.b2"][k]
        extra = dict(k=k)
    elif v == "proto":
        k = _discrete(indicator, cfg)
        eta = np.tanh(store["grp.prototypes"] @ store["gs.proto.W"].T + store["gs.proto.b"])
        W1, b1, W2, b2 = unpack_micro_mlp(eta[k], d_a, m)
        extra = dict(k=k, eta=eta)
    else:
        H = _dense(indicator, cfg)
        W1, b1, W2, b2 = unpack_micro_mlp(H, d_a, m)
        extra = dict()
    A, hidden = micro_mlp_forward(A_s, W1, b1, W2, b2)
    return A, dict(variant=v, A_s=A_s, G=G, W1=W1, W2=W2, hidden=hidden, **extra)


def gs_backward(dA, cache: dict, store: ParamStore, cfg: ModelConfig):
    """Returns (dA_s, dG); dG is None when g is not on the head's differentiable path."""
    v = cache["variant"]
    if v == "none":
        return dA, None
    dA_s, dW1, db1, dW2, db2 = micro_mlp_backward(dA, cache["A_s"], cache["hidden"], cache["W1"], cache["W2"])
    gr = store.grads
    K = cfg.n_groups
    if v == "kmeans":
        k = cache["k"]
        for name, g in (("W1", dW1), ("b1", db1), ("W2", dW2), ("b2", db2)):
            buf = gr[f"gs.tower.{name}"]
            for j in range(K):
                sel = k == j
                if sel.any():
                    buf[j] += g[sel].sum(axis=0)
        return dA_s, None
    d_packed = pack_micro_mlp(dW1, db1, dW2, db2)
    if v == "proto":
        k, eta = cache["k"], cache["eta"]
        d_eta = np.zeros_like(eta)
        for j in range(K):
            sel = k == j
            if sel.any():
                d_eta[j] = d_packed[sel].sum(axis=0)
        d_pre = tanh_backward(d_eta, eta)
        gr["gs.proto.W"] += d_pre.T @ store["grp.prototypes"]
        gr["gs.proto.b"] += d_pre.sum(axis=0)
        gr["grp.prototypes"] += d_pre @ store["gs.proto.W"]
        return dA_s, None
    gr["grp.L"] += d_packed.T @ cache["G"]
    return dA_s, d_packed @ store["grp.L"]


def _discrete(indicator, cfg: ModelConfig) -> np.ndarray:
    k = np.asarray(indicator)
    if k.ndim != 1 or k.dtype.kind not in "iu":
        raise TypeError(f"{cfg.variant} head needs discrete group indices")
    if k.size and (k.min() < 0 or k.max() >= cfg.n_groups):
        raise ValueError(f"group index outside [0, {cfg.n_groups})")
    return k


def _dense(indicator, cfg: ModelConfig) -> np.ndarray:
    H = np.asarray(indicator)
    if H.ndim != 2 or H.dtype.kind != "f":
        raise TypeError("can head needs dense group vectors")
    if H.shape[1] != cfg.micro_size:
        raise ShapeError(f"dense group vector has length {H.shape[1]}, expected P={cfg.micro_size}")
    return H


# ---------------------------------------------------------------- full policy

class Policy:
    """Bundles config, vocabulary and parameters; forward/backward over batches."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, store: ParamStore):
        self.cfg = cfg
        self.vocab = vocab
        self.store = store
        self.item_category = vocab.item_category()

    def geo(self, batch: StateBatch) -> np.ndarray:
        return geo.encode_geo_batch(batch, self.store, self.cfg.aoi_level)

    def assign(self, G: np.ndarray):
        from .grouping import assign_batch

        return assign_batch(G, self.store, self.cfg)

    def candidate_embeddings(self, candidates: np.ndarray) -> np.ndarray:
        return geo.item_embeddings(candidates, self.item_category[candidates], self.store)

    def forward(self, batch: StateBatch, candidates: np.ndarray, indicator=None):
        """Logits [n, C]. ``indicator`` defaults to the recognition model's assignment."""
        enc = geo.encode_states(batch, self.store, self.cfg.aoi_level)
        if indicator is None and self.cfg.variant != "none":
            indicator = self.assign(enc.g)
        A_s, din_cache = din_forward(enc, self.store)
        A, gs_cache = gs_forward(A_s, enc.g, indicator, self.store, self.cfg)
        E = self.candidate_embeddings(candidates)
        logits = np.einsum("bd,bcd->bc", A, E)
        return logits, dict(batch=batch, candidates=candidates, din=din_cache, gs=gs_cache, A=A, E=E)

    def backward(self, dlogits: np.ndarray, cache: dict) -> None:
        store, cfg = self.store, self.cfg
        cands = cache["candidates"]
        dA = np.einsum("bc,bcd->bd", dlogits, cache["E"])
        dE = dlogits[:, :, None] * cache["A"][:, None, :]
        geo.item_embeddings_backward(dE, cands, self.item_category[cands], store)
        dA_s, dG_gs = gs_backward(dA, cache["gs"], store, cfg)
        d_profile, d_seq, dG = din_backward(dA_s, cache["din"], store)
        if dG_gs is not None:
            dG = dG + dG_gs
        geo.encode_states_backward(d_profile, d_seq, dG, cache["batch"], store, cfg.aoi_level)

    def log_prob(self, batch, candidates, chosen, indicator=None) -> np.ndarray:
        logits, _ = self.forward(batch, candidates, indicator)
        return log_softmax(logits)[np.arange(len(chosen)), chosen]

    def weighted_log_prob(self, batch, candidates, chosen, weights, indicator=None) -> float:
        """sum_i weights_i * log pi(chosen_i | s_i); accumulates its gradient."""
        logits, cache = self.forward(batch, candidates, indicator)
        n = len(chosen)
        p = softmax(logits)
        lp = np.log(p[np.arange(n), chosen])
        onehot = np.zeros_like(p)
        onehot[np.arange(n), chosen] = 1.0
        self.backward(weights[:, None] * (onehot - p), cache)
        return float(np.dot(weights, lp))


# ---------------------------------------------------------------- single-sample helpers

def din_forward_single(profile_vec, seq_embs, g, store: ParamStore) -> np.ndarray:
    L = seq_embs.shape[0]
    d = store["emb.item"].shape[1]
    seq = np.zeros((1, max(L, 1), d))
    mask = np.zeros((1, max(L, 1)), dtype=bool)
    seq[0, :L] = seq_embs
    mask[0, :L] = True
    enc = geo.EncodedStates(profile_vec[None, :], seq, mask, g[None, :])
    A_s, cache = din_forward(enc, store)
    return A_s[0], cache["w"][0, :L]


def gs_forward_single(a_s, h, store: ParamStore, cfg: ModelConfig, g) -> np.ndarray:
    if cfg.variant == "none":
        return a_s
    if isinstance(h, Discrete) != (cfg.variant in ("kmeans", "proto")):
        raise TypeError(f"group indicator {type(h).__name__} does not match variant {cfg.variant!r}")
    ind = np.array([h.k]) if isinstance(h, Discrete) else np.asarray(h.h, dtype=float)[None, :]
    A, _ = gs_forward(np.asarray(a_s)[None, :], np.asarray(g)[None, :], ind, store, cfg)
    return A[0]


def score_items(a, candidate_embs) -> np.ndarray:
    E = np.asarray(candidate_embs, dtype=float)
    if E.ndim != 2 or E.shape[0] < 1:
        raise ShapeError("score_items needs at least one candidate")
    return E @ np.asarray(a, dtype=float)


def policy_log_prob(logits, chosen: int) -> float:
    logits = np.asarray(logits, dtype=float)
    if not 0 <= chosen < logits.shape[0]:
        raise IndexError(f"chosen index {chosen} outside candidate set of size {logits.shape[0]}")
    return float(log_softmax(logits)[chosen])


def top_k_recommend(logits, k: int) -> list[int]:
    """Indices of the k largest logits; ties go to the lower index."""
    logits = np.asarray(logits, dtype=float)
    if k > logits.shape[0]:
        raise ValueError(f"k={k} exceeds candidate count {logits.shape[0]}")
    order = np.argsort(-logits, kind="stable")
    return [int(i) for i in order[:k]]
