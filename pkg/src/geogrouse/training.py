"""EM training: recognition-model E-steps alternating with REINFORCE M-steps."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import grouping
from .episodes import Episode, EpisodeBatch, Step  # noqa: F401  (re-exported)
from .geo import StateBatch, Vocab
from .numerics import NumericalError, ParamStore, grad_check
from .policy import ModelConfig, Policy, build_params, phi_only_names
from .simulator import Environment, simulate_sessions

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("round", "mean_return", "objective", "sse_or_loglik", "grad_norm")


@dataclass
class TrainConfig:
    gamma: float = 0.9
    learning_rate: float = 0.001
    batch_size: int = 2000
    em_rounds: int = 200
    m_steps_per_round: int = 1
    e_step_every: int = 1
    baseline: bool = True
    init_sample: int = 1000
    chunk_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        for name in ("learning_rate", "batch_size", "m_steps_per_round", "e_step_every",
                     "init_sample", "chunk_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.em_rounds < 0:
            raise ValueError("em_rounds must be non-negative")


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        for k in HISTORY_FIELDS[1:]:
            if not np.isfinite(row[k]):
                raise NumericalError(f"round {row['round']}: {k} is not finite ({row[k]})")
        self.records.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in self.records:
            w.writerow([r["round"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[1:]])
        return buf.getvalue()

    def __len__(self) -> int:
        return len(self.records)


def init_params(cfg: ModelConfig, vocab: Vocab, seed: int, g_sample: StateBatch | None = None) -> Policy:
    """Fresh policy; centroids/prototypes come from k-means on the initial g of ``g_sample``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    store = build_params(cfg, vocab, rng)
    policy = Policy(cfg, vocab, store)
    if cfg.variant in ("kmeans", "proto"):
        if g_sample is None:
            raise ValueError(f"{cfg.variant} initialisation needs a sample of states")
        centroids = grouping.kmeans_fit(policy.geo(g_sample), cfg.n_groups, cfg.kmeans_max_iters, seed)
        name = "grp.centroids" if cfg.variant == "kmeans" else "grp.prototypes"
        store.params[name][...] = centroids
    return policy


def policy_scorer(policy: Policy):
    return lambda states, cands: policy.forward(states, cands)[0]


def surrogate_gradient(batch: EpisodeBatch, policy: Policy, weights: np.ndarray, chunk_size: int = 4096) -> float:
    """Accumulate grad of sum_i w_i log pi(a_i | s_i, h_i) with h from the frozen recognition model."""
    total = 0.0
    n = len(batch)
    for lo in range(0, n, chunk_size):
        idx = np.arange(lo, min(n, lo + chunk_size))
        states = batch.states.take(idx)
        indicator = policy.assign(policy.geo(states)) if policy.cfg.variant != "none" else None
        total += policy.weighted_log_prob(states, batch.candidates[idx], batch.chosen[idx], weights[idx], indicator)
    return total


def step_weights(batch: EpisodeBatch, gamma: float, baseline: bool) -> np.ndarray:
    G = batch.returns(gamma)
    return G - G.mean() if baseline else G


def m_step(batch: EpisodeBatch, policy: Policy, cfg: TrainConfig) -> dict:
    """One REINFORCE ascent step: theta += lr * sum_t (G_t - B) grad log pi(a_t | s_t, h_t)."""
    if len(batch) == 0:
        raise ValueError("M-step needs a nonempty batch")
    store = policy.store
    store.zero_grads()
    weights = step_weights(batch, cfg.gamma, cfg.baseline)
    objective = surrogate_gradient(batch, policy, weights, cfg.chunk_size)
    frozen = set(phi_only_names(policy.cfg))
    names = [n for n in store.names() if n not in frozen]
    for name in names:
        g = store.grads[name]
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NumericalError(f"non-finite gradient in {name}: {bad} of {g.size} entries "
                                 f"(objective={objective}, max |w|={np.abs(weights).max()})")
    grad_norm = store.grad_norm(names)
    for name in names:
        store.params[name] += cfg.learning_rate * store.grads[name]
    return dict(objective=objective / len(batch), grad_norm=grad_norm)


def round_rng(seed: int, rnd: int, stream: int = 1) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, rnd]))


def initial_sample(env: Environment, n: int, seed: int) -> StateBatch:
    rng = round_rng(seed, 0, stream=2)
    users = rng.integers(env.spec.n_users, size=n)
    return simulate_sessions(env, users, None, rng, max_len=1).states


def train_em(source, model_cfg: ModelConfig, cfg: TrainConfig, policy: Policy | None = None):
    """Run ``em_rounds`` of {E-step every ``e_step_every`` rounds, then M-steps}.

    ``source`` is an :class:`Environment` (fresh on-policy sessions every
    M-step) or an :class:`EpisodeBatch` of logged sessions (off-policy replay,
    sampled with replacement by episode).
    Returns (policy, history).
    """
    if isinstance(source, Environment):
        vocab, sample = source.vocab, lambda: initial_sample(source, cfg.init_sample, cfg.seed)
    elif isinstance(source, EpisodeBatch):
        if len(source) == 0:
            raise ValueError("empty session log")
        vocab, sample = None, lambda: source.states
    else:
        raise TypeError(f"unsupported data source {type(source).__name__}")
    if policy is None:
        if vocab is None:
            raise ValueError("training from logs needs an initial policy (vocabulary unknown)")
        policy = init_params(model_cfg, vocab, cfg.seed, sample())
    history = TrainHistory()

    for rnd in range(cfg.em_rounds):
        rng = round_rng(cfg.seed, rnd)
        stats = []
        e_obj = history.records[-1]["sse_or_loglik"] if history.records else 0.0
        for m in range(cfg.m_steps_per_round):
            batch = _draw_batch(source, policy, cfg, rng, rnd)
            if m == 0:
                mean_return = float(batch.episode_rewards().mean())
                if rnd % cfg.e_step_every == 0:
                    e_obj = grouping.e_step(policy.geo(batch.states), policy.store, model_cfg)
            stats.append(m_step(batch, policy, cfg))
        history.append(round=rnd, mean_return=mean_return,
                       objective=float(np.mean([s["objective"] for s in stats])),
                       sse_or_loglik=float(e_obj),
                       grad_norm=float(np.mean([s["grad_norm"] for s in stats])))
        if rnd % 20 == 0 or rnd == cfg.em_rounds - 1:
            log.info("round %d mean_return %.4f grad_norm %.3g", rnd, mean_return, history.records[-1]["grad_norm"])
    return policy, history


def _draw_batch(source, policy: Policy, cfg: TrainConfig, rng: np.random.Generator, rnd: int) -> EpisodeBatch:
    if isinstance(source, Environment):
        users = rng.integers(source.spec.n_users, size=cfg.batch_size)
        return simulate_sessions(source, users, policy_scorer(policy), rng,
                                 session_offset=rnd * cfg.batch_size * cfg.m_steps_per_round)
    picks = rng.integers(source.n_episodes, size=cfg.batch_size)
    return select_episodes(source, picks)


def select_episodes(batch: EpisodeBatch, picks: np.ndarray) -> EpisodeBatch:
    parts = []
    for new_e, e in enumerate(picks):
        idx = np.flatnonzero(batch.episode == e)
        parts.append(EpisodeBatch(
            states=batch.states.take(idx), candidates=batch.candidates[idx], chosen=batch.chosen[idx],
            reward=batch.reward[idx], episode=np.zeros(len(idx), dtype=np.int64), t=batch.t[idx],
            user_ids=batch.user_ids[[e]], session_ids=batch.session_ids[[e]],
            labels=None if batch.labels is None else batch.labels[idx]))
    return EpisodeBatch.concat(parts)


# ---------------------------------------------------------------- gradient check

def check_vocab() -> Vocab:
    return Vocab(n_items=12, n_categories=3, n_cities=2, n_gps_cells=6,
                 aoi_sizes=(1, 2, 3, 6, 12), profile_sizes=(3, 2))


def random_states(vocab: Vocab, n: int, max_seq_len: int, rng: np.random.Generator) -> StateBatch:
    batch = StateBatch.empty(n, len(vocab.profile_sizes), max_seq_len)
    for f, size in enumerate(vocab.profile_sizes):
        batch.profile[:, f] = rng.integers(size, size=n)
    batch.seq_len[:] = rng.integers(max_seq_len + 1, size=n)
    batch.seq_items[:] = rng.integers(vocab.n_items, size=(n, max_seq_len))
    batch.seq_cats[:] = vocab.item_category()[batch.seq_items]
    batch.seq_items[~batch.seq_mask] = 0
    batch.seq_cats[~batch.seq_mask] = 0
    batch.city[:] = rng.integers(vocab.n_cities, size=n)
    batch.gps[:] = rng.integers(vocab.n_gps_cells, size=n)
    for lvl, size in enumerate(vocab.aoi_sizes):
        batch.aoi[:, lvl] = rng.integers(size, size=n)
    batch.hour[:] = rng.integers(vocab.n_hours, size=n)
    batch.season[:] = rng.integers(vocab.n_seasons, size=n)
    return batch


def conditioned_params(store: ParamStore, rng: np.random.Generator) -> None:
    """Redraw every parameter at fan-in scale so activations and gradients are O(1).

    The training init is far too small for finite differences: deep
    gradients shrink below the roundoff floor of the central difference.
    """
    for name, value in store.params.items():
        if name.startswith("emb.") or name in ("grp.centroids", "grp.prototypes"):
            value[...] = rng.uniform(-1.0, 1.0, value.shape)
        elif value.ndim == 1 or name.endswith(".b1") or name.endswith(".b2"):
            value[...] = rng.uniform(-0.5, 0.5, value.shape)
        else:
            # [in, out] weights, except generator maps [P, d_g] and towers [K, in, out]
            fan_in = value.shape[1] if name in ("grp.L", "gs.proto.W") or value.ndim == 3 else value.shape[0]
            bound = np.sqrt(3.0 / fan_in)
            value[...] = rng.uniform(-bound, bound, value.shape)


def policy_grad_check(model_cfg: ModelConfig, seed: int, n_states: int = 6, n_candidates: int = 5,
                      eps: float = 1e-5, max_coords: int | None = 30) -> float:
    """Max relative error of the analytic gradient of sum_i w_i log pi(a_i | s_i, h_i).

    Covers embeddings, DIN, the group-specific head (incl. prototypes, W, b
    and L_phi) and scoring. Discrete assignments are fixed before perturbing.
    """
    rng = np.random.default_rng(seed)
    vocab = check_vocab()
    store = build_params(model_cfg, vocab, rng)
    conditioned_params(store, rng)
    policy = Policy(model_cfg, vocab, store)
    states = random_states(vocab, n_states, 4, rng)
    cands = np.stack([rng.choice(vocab.n_items, n_candidates, replace=False) for _ in range(n_states)])
    chosen = rng.integers(n_candidates, size=n_states)
    weights = rng.normal(size=n_states)
    indicator = None
    if model_cfg.variant in ("kmeans", "proto"):
        indicator = policy.assign(policy.geo(states))

    def f(s: ParamStore) -> float:
        return policy.weighted_log_prob(states, cands, chosen, weights, indicator)

    names = [n for n in store.names() if n not in phi_only_names(model_cfg)]
    return grad_check(f, store, eps, names=names, max_coords=max_coords, rng=rng)
