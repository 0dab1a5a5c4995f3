"""Synthetic O2O world with planted geographic groups.

Each group is a functional region with its own category preference row
Pi[g]. Users live in GPS cells; every cell belongs to exactly one group. The
AOI hierarchy is built so that level 3 coincides with the groups, levels 1-2
merge groups and levels 4-5 split them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .episodes import EpisodeBatch
from .geo import AOI_LEVELS, GeoContext, StateBatch, Vocab
from .numerics import softmax


@dataclass
class EnvironmentSpec:
    n_groups: int = 3
    n_categories: int = 5
    n_items: int = 200
    candidates: int = 20
    n_users: int = 1200
    n_cities: int = 1
    cells_per_group: int = 20
    aoi_split: int = 4
    preference: list | None = None
    preference_decay: float = 0.5
    group_weight: float = 6.0
    taste_weight: float = 2.0
    noise_scale: float = 0.3
    taste_concentration: float = 0.5
    activity_buckets: int = 4
    history_max: int = 5
    max_history: int = 10
    session_length: int = 5
    hour_shift_prob: float = 0.2
    target_ctr: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_groups < 1 or self.n_categories < 1 or self.n_items < 1:
            raise ValueError("n_groups, n_categories and n_items must be positive")
        if not 1 <= self.candidates <= self.n_items:
            raise ValueError(f"candidates={self.candidates} must lie in 1..n_items={self.n_items}")
        if self.cells_per_group < 1 or self.aoi_split < 1 or self.n_users < 1 or self.n_cities < 1:
            raise ValueError("cells_per_group, aoi_split, n_users and n_cities must be positive")
        if self.session_length < 1 or self.max_history < 1:
            raise ValueError("session_length and max_history must be positive")
        if not 0.0 < self.target_ctr < 1.0:
            raise ValueError("target_ctr must lie in (0, 1)")
        if self.preference is not None:
            P = np.asarray(self.preference, dtype=float)
            if P.shape != (self.n_groups, self.n_categories):
                raise ValueError(f"preference must be {self.n_groups}x{self.n_categories}, got {P.shape}")
            if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-9):
                raise ValueError("preference rows must be probability vectors")


@dataclass(frozen=True)
class SyntheticUser:
    user_id: int
    home: GeoContext
    taste: np.ndarray = field(compare=False)
    profile_ids: tuple[int, ...]
    history: tuple[tuple[int, int], ...]


@dataclass
class Environment:
    spec: EnvironmentSpec
    preference: np.ndarray  # [G, n_categories]
    item_category: np.ndarray  # [n_items]
    item_effect: np.ndarray  # [n_items]
    cell_group: np.ndarray  # [n_cells]
    cell_city: np.ndarray  # [n_cells]
    cell_aoi: np.ndarray  # [n_cells, 5]
    users: list[SyntheticUser]
    user_cell: np.ndarray
    user_taste: np.ndarray  # [n_users, n_categories]
    bias: float
    click_prob: np.ndarray  # [n_users, n_items]

    @property
    def aoi_sizes(self) -> tuple[int, ...]:
        s = self.spec
        G, k = s.n_groups, s.aoi_split
        return (1, (G + 1) // 2, G, G * k, G * k * k)

    @property
    def vocab(self) -> Vocab:
        s = self.spec
        return Vocab(n_items=s.n_items, n_categories=s.n_categories, n_cities=s.n_cities,
                     n_gps_cells=len(self.cell_group), aoi_sizes=self.aoi_sizes,
                     profile_sizes=(s.n_categories, s.activity_buckets))

    def user_group(self, user_ids) -> np.ndarray:
        return self.cell_group[self.user_cell[user_ids]]

    def click_logits(self, user_ids, items) -> np.ndarray:
        s = self.spec
        u = np.asarray(user_ids)
        items = np.asarray(items)
        u_b = u.reshape(u.shape + (1,) * (items.ndim - u.ndim))
        cat = self.item_category[items]
        return (s.group_weight * self.preference[self.user_group(u_b), cat]
                + s.taste_weight * self.user_taste[u_b, cat]
                + self.item_effect[items] + self.bias)


def group_layout(spec: EnvironmentSpec, rng: np.random.Generator):
    """Cells -> (group, city, aoi path). Level-3 AOI ids equal group ids."""
    G, cpg, k = spec.n_groups, spec.cells_per_group, spec.aoi_split
    n_cells = G * cpg
    cell_group = np.arange(n_cells) // cpg
    local = np.arange(n_cells) % cpg
    l5_local = local % (k * k)
    aoi = np.empty((n_cells, AOI_LEVELS), dtype=np.int64)
    aoi[:, 0] = 0
    aoi[:, 1] = cell_group // 2
    aoi[:, 2] = cell_group
    aoi[:, 3] = cell_group * k + l5_local // k
    aoi[:, 4] = cell_group * k * k + l5_local
    cell_city = rng.integers(spec.n_cities, size=n_cells)
    return cell_group, cell_city, aoi


def preference_matrix(spec: EnvironmentSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.preference is not None:
        return np.asarray(spec.preference, dtype=float)
    G, nc = spec.n_groups, spec.n_categories
    P = np.empty((G, nc))
    for g in range(G):
        # distinct top category per group, the rest in random order
        top = g % nc
        rest = rng.permutation([c for c in range(nc) if c != top])
        order = np.concatenate([[top], rest])
        row = np.empty(nc)
        row[order] = spec.preference_decay ** np.arange(nc)
        P[g] = row / row.sum()
    return P


def calibrate_bias(base_logits: np.ndarray, target: float) -> float:
    """Bias b with mean(sigmoid(base + b)) == target."""
    f = lambda b: float(np.mean(expit(base_logits + b))) - target  # noqa: E731
    return brentq(f, -60.0, 60.0, xtol=1e-14, rtol=1e-14, maxiter=500)


def generate_environment(spec: EnvironmentSpec) -> Environment:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    preference = preference_matrix(spec, rng)
    cell_group, cell_city, cell_aoi = group_layout(spec, rng)
    item_category = np.arange(spec.n_items) % spec.n_categories
    item_effect = rng.normal(0.0, spec.noise_scale, size=spec.n_items) if spec.noise_scale > 0 else np.zeros(spec.n_items)

    n_cells = len(cell_group)
    user_cell = rng.integers(n_cells, size=spec.n_users)
    taste = rng.dirichlet(np.full(spec.n_categories, spec.taste_concentration), size=spec.n_users)
    activity = rng.integers(spec.activity_buckets, size=spec.n_users)

    base = (spec.group_weight * preference[cell_group[user_cell]][:, item_category]
            + spec.taste_weight * taste[:, item_category] + item_effect[None, :])
    bias = calibrate_bias(base, spec.target_ctr)
    click_prob = expit(base + bias)

    users = []
    for u in range(spec.n_users):
        c = user_cell[u]
        home = GeoContext(int(cell_city[c]), int(c), tuple(int(x) for x in cell_aoi[c]),
                          int(rng.integers(24)), int(rng.integers(4)))
        n_hist = int(rng.integers(spec.history_max + 1))
        p = click_prob[u] / click_prob[u].sum()
        items = rng.choice(spec.n_items, size=n_hist, p=p)
        history = tuple((int(i), int(item_category[i])) for i in items)[-spec.max_history:]
        profile = (int(np.argmax(taste[u])), int(activity[u]))
        users.append(SyntheticUser(u, home, taste[u], profile, history))

    return Environment(spec, preference, item_category, item_effect, cell_group, cell_city, cell_aoi,
                       users, user_cell, taste, bias, click_prob)


def click_probability(user: SyntheticUser | int, item: int, env: Environment) -> float:
    u = user.user_id if isinstance(user, SyntheticUser) else int(user)
    if not 0 <= item < env.spec.n_items:
        raise ValueError(f"item {item} not in catalog")
    return float(env.click_prob[u, item])


# ---------------------------------------------------------------- sessions

def initial_states(env: Environment, user_ids: np.ndarray, rng: np.random.Generator) -> StateBatch:
    s = env.spec
    n = len(user_ids)
    batch = StateBatch.empty(n, 2, s.max_history)
    for i, u in enumerate(user_ids):
        user = env.users[u]
        batch.profile[i] = user.profile_ids
        L = len(user.history)
        batch.seq_len[i] = L
        for j, (item, cat) in enumerate(user.history):
            batch.seq_items[i, j] = item
            batch.seq_cats[i, j] = cat
        batch.aoi[i] = user.home.aoi_path
    cells = env.user_cell[user_ids]
    batch.city[:] = env.cell_city[cells]
    batch.gps[:] = cells
    batch.hour[:] = rng.integers(24, size=n)
    batch.season[:] = rng.integers(4, size=n)
    return batch


def sample_candidates(n: int, env: Environment, rng: np.random.Generator) -> np.ndarray:
    C = env.spec.candidates
    keys = rng.random((n, env.spec.n_items))
    return np.argpartition(keys, C - 1, axis=1)[:, :C]


def append_clicks(batch: StateBatch, items: np.ndarray, cats: np.ndarray, clicked: np.ndarray) -> None:
    L = batch.seq_items.shape[1]
    full = clicked & (batch.seq_len >= L)
    for arr, new in ((batch.seq_items, items), (batch.seq_cats, cats)):
        arr[full, :-1] = arr[full, 1:]
        arr[full, -1] = new[full]
        grow = clicked & ~full
        arr[grow, batch.seq_len[grow]] = new[grow]
    batch.seq_len[clicked & ~full] += 1


def simulate_sessions(
    env: Environment,
    user_ids,
    scorer=None,
    rng: np.random.Generator | None = None,
    max_len: int | None = None,
    greedy: bool = False,
    full_feedback: bool = False,
    session_offset: int = 0,
) -> EpisodeBatch:
    """Run one session per user id, all sessions stepped together.

    ``scorer(states, candidates) -> logits`` defines the acting policy; None
    means the uniform logger. Sampling is from softmax(logits), or argmax
    (lowest index on ties) when ``greedy``.
    """
    rng = rng if rng is not None else np.random.default_rng(env.spec.seed)
    user_ids = np.asarray(user_ids, dtype=np.int64)
    n = len(user_ids)
    T = max_len or env.spec.session_length
    state = initial_states(env, user_ids, rng)
    steps, cands_all, chosen_all, rew_all, lab_all = [], [], [], [], []
    for t in range(T):
        cands = sample_candidates(n, env, rng)
        logits = np.zeros(cands.shape) if scorer is None else scorer(state, cands)
        if greedy:
            chosen = np.argmax(logits, axis=1)
        else:
            p = softmax(logits)
            u = rng.random((n, 1))
            chosen = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), cands.shape[1] - 1)
        items = cands[np.arange(n), chosen]
        if full_feedback:
            labels = rng.random(cands.shape) < env.click_prob[user_ids[:, None], cands]
            clicked = labels[np.arange(n), chosen]
            lab_all.append(labels.astype(float))
        else:
            clicked = rng.random(n) < env.click_prob[user_ids, items]
        steps.append(state.take(np.arange(n)))
        cands_all.append(cands)
        chosen_all.append(chosen)
        rew_all.append(clicked.astype(float))
        append_clicks(state, items, env.item_category[items], clicked)
        shift = rng.random(n) < env.spec.hour_shift_prob
        state.hour[shift] = (state.hour[shift] + 1) % 24

    return EpisodeBatch(
        states=StateBatch.concat(steps),
        candidates=np.concatenate(cands_all),
        chosen=np.concatenate(chosen_all),
        reward=np.concatenate(rew_all),
        episode=np.tile(np.arange(n), T),
        t=np.repeat(np.arange(T), n),
        user_ids=user_ids,
        session_ids=np.arange(session_offset, session_offset + n),
        labels=np.concatenate(lab_all) if full_feedback else None,
    )


def simulate_session(user, scorer, env: Environment, max_len: int, rng: np.random.Generator, greedy=False):
    """A single session as an :class:`Episode`."""
    u = user.user_id if isinstance(user, SyntheticUser) else int(user)
    batch = simulate_sessions(env, [u], scorer, rng, max_len=max_len, greedy=greedy)
    return batch.to_episodes()[0]


def oracle_scorer(env: Environment, user_ids):
    """Scores candidates by their true click probability (Bayes-optimal ranking)."""
    user_ids = np.asarray(user_ids)

    def score(states, cands):
        return env.click_prob[user_ids[:, None], cands]

    return score
