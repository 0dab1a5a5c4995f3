"""Logged sessions: per-step records and a columnar batch used for training."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geo import GeoContext, State, StateBatch


@dataclass(frozen=True)
class Step:
    state: State
    chosen_item: int
    candidate_set: tuple[int, ...]
    reward: int
    # click outcome of every candidate, present only in full-feedback logs
    labels: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.chosen_item not in self.candidate_set:
            raise ValueError(f"chosen item {self.chosen_item} not in candidate set")
        if self.reward not in (0, 1):
            raise ValueError(f"reward must be 0 or 1, got {self.reward}")


@dataclass(frozen=True)
class Episode:
    steps: tuple[Step, ...]
    session_id: int
    user_id: int

    def __post_init__(self):
        if not self.steps:
            raise ValueError("an episode needs at least one step")


@dataclass
class EpisodeBatch:
    """Columnar steps of many episodes. Step i belongs to episode ``episode[i]`` at time ``t[i]``."""

    states: StateBatch
    candidates: np.ndarray  # [n, C] item ids
    chosen: np.ndarray  # [n] position in candidates
    reward: np.ndarray  # [n] 0/1
    episode: np.ndarray  # [n]
    t: np.ndarray  # [n]
    user_ids: np.ndarray  # [n_episodes]
    session_ids: np.ndarray  # [n_episodes]
    labels: np.ndarray | None = None  # [n, C] 0/1

    def __len__(self) -> int:
        return self.chosen.shape[0]

    @property
    def n_episodes(self) -> int:
        return self.user_ids.shape[0]

    @property
    def chosen_items(self) -> np.ndarray:
        return self.candidates[np.arange(len(self)), self.chosen]

    def returns(self, gamma: float) -> np.ndarray:
        """Discounted return G_t for every step."""
        if not 0.0 < gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
        T = int(self.t.max()) + 1 if len(self) else 0
        R = np.zeros((self.n_episodes, T + 1))
        R[self.episode, self.t] = self.reward
        G = np.zeros_like(R)
        for t in range(T - 1, -1, -1):
            G[:, t] = R[:, t] + gamma * G[:, t + 1]
        return G[self.episode, self.t]

    def episode_rewards(self) -> np.ndarray:
        return np.bincount(self.episode, weights=self.reward, minlength=self.n_episodes)

    def to_episodes(self) -> list[Episode]:
        states = self.states.to_states()
        order = np.lexsort((self.t, self.episode))
        per_ep: list[list[Step]] = [[] for _ in range(self.n_episodes)]
        for i in order:
            labels = None if self.labels is None else tuple(int(x) for x in self.labels[i])
            per_ep[self.episode[i]].append(Step(
                states[i], int(self.candidates[i, self.chosen[i]]),
                tuple(int(x) for x in self.candidates[i]), int(self.reward[i]), labels))
        return [Episode(tuple(steps), int(s), int(u))
                for steps, s, u in zip(per_ep, self.session_ids, self.user_ids)]

    @classmethod
    def from_episodes(cls, episodes, max_seq_len: int) -> "EpisodeBatch":
        steps = [(e, t, st) for e, ep in enumerate(episodes) for t, st in enumerate(ep.steps)]
        if not steps:
            raise ValueError("no episodes")
        C = {len(st.candidate_set) for _, _, st in steps}
        if len(C) != 1:
            raise ValueError(f"candidate sets must share one size, got {sorted(C)}")
        cands = np.array([st.candidate_set for _, _, st in steps], dtype=np.int64)
        chosen = np.array([st.candidate_set.index(st.chosen_item) for _, _, st in steps])
        has_labels = all(st.labels is not None for _, _, st in steps)
        return cls(
            states=StateBatch.from_states([st.state for _, _, st in steps], max_seq_len),
            candidates=cands,
            chosen=chosen,
            reward=np.array([st.reward for _, _, st in steps], dtype=float),
            episode=np.array([e for e, _, _ in steps]),
            t=np.array([t for _, t, _ in steps]),
            user_ids=np.array([ep.user_id for ep in episodes]),
            session_ids=np.array([ep.session_id for ep in episodes]),
            labels=np.array([st.labels for _, _, st in steps], dtype=float) if has_labels else None,
        )

    @classmethod
    def concat(cls, batches) -> "EpisodeBatch":
        offsets = np.cumsum([0] + [b.n_episodes for b in batches[:-1]])
        labels = None
        if all(b.labels is not None for b in batches):
            labels = np.concatenate([b.labels for b in batches])
        return cls(
            states=StateBatch.concat([b.states for b in batches]),
            candidates=np.concatenate([b.candidates for b in batches]),
            chosen=np.concatenate([b.chosen for b in batches]),
            reward=np.concatenate([b.reward for b in batches]),
            episode=np.concatenate([b.episode + o for b, o in zip(batches, offsets)]),
            t=np.concatenate([b.t for b in batches]),
            user_ids=np.concatenate([b.user_ids for b in batches]),
            session_ids=np.concatenate([b.session_ids for b in batches]),
            labels=labels,
        )


# ---------------------------------------------------------------- JSON-lines IO

def _int(x, what: str) -> int:
    if isinstance(x, bool) or not isinstance(x, (int, np.integer)):
        raise TypeError(f"{what} must be an int, got {type(x).__name__}: {x!r}")
    return int(x)


def _ints(xs, what: str) -> list[int]:
    return [_int(x, what) for x in xs]


def episode_to_json(ep: Episode) -> dict:
    steps = []
    for st in ep.steps:
        s, g = st.state, st.state.geo
        row = {
            "state": {
                "profile": _ints(s.user_profile_ids, "profile id"),
                "behavior_seq": [_ints(pair, "behavior id") for pair in s.behavior_seq],
                "geo": {
                    "city": _int(g.city_id, "city id"),
                    "gps": _int(g.gps_cell_id, "gps cell id"),
                    "aoi_path": _ints(g.aoi_path, "aoi id"),
                    "hour": _int(g.hour, "hour"),
                    "season": _int(g.season, "season"),
                },
            },
            "candidates": _ints(st.candidate_set, "candidate id"),
            "chosen_item": _int(st.chosen_item, "chosen item"),
            "reward": _int(st.reward, "reward"),
        }
        if st.labels is not None:
            row["labels"] = _ints(st.labels, "label")
        steps.append(row)
    return {"session_id": _int(ep.session_id, "session id"), "user_id": _int(ep.user_id, "user id"), "steps": steps}


def episode_from_json(obj: dict) -> Episode:
    steps = []
    for row in obj["steps"]:
        s, g = row["state"], row["state"]["geo"]
        geo = GeoContext(_int(g["city"], "city"), _int(g["gps"], "gps"), tuple(_ints(g["aoi_path"], "aoi")),
                         _int(g["hour"], "hour"), _int(g["season"], "season"))
        state = State(tuple(_ints(s["profile"], "profile")),
                      tuple(tuple(_ints(p, "behavior")) for p in s["behavior_seq"]), geo)
        labels = tuple(_ints(row["labels"], "label")) if "labels" in row else None
        steps.append(Step(state, _int(row["chosen_item"], "chosen"), tuple(_ints(row["candidates"], "candidate")),
                          _int(row["reward"], "reward"), labels))
    return Episode(tuple(steps), _int(obj["session_id"], "session id"), _int(obj["user_id"], "user id"))


def write_sessions(episodes, path) -> None:
    lines = [json.dumps(episode_to_json(ep), separators=(",", ":")) for ep in episodes]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_sessions(path) -> list[Episode]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(episode_from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed session record ({exc})") from exc
    return out
