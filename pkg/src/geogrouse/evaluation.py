"""Offline ranking metrics, the evaluation harness and the AOI-level sweep."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .episodes import EpisodeBatch
from .numerics import log_softmax
from .simulator import Environment, simulate_sessions

NDCG_KS = (3, 5, 10, 20, 50)
HIT_K = 10


def auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted 1/2, via rank sums."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    # average ranks are half-integers, so twice the rank sum is an exact integer
    twice_ranks = np.rint(2.0 * rankdata(scores, method="average")).astype(np.int64)
    u2 = int(twice_ranks[pos].sum()) - n_pos * (n_pos + 1)
    return (u2 / 2) / (n_pos * n_neg)


def ndcg_at_k(ranked_labels, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = np.asarray(ranked_labels, dtype=float)
    top = rel[:k]
    discounts = 1.0 / np.log2(np.arange(2, top.size + 2))
    dcg = float(np.sum(top * discounts))
    ideal = np.sort(rel)[::-1][:k]
    idcg = float(np.sum(ideal * discounts[: ideal.size]))
    return dcg / idcg if idcg > 0 else 0.0


def hit_rate_at_k(ranked_labels, k: int) -> int:
    return int(np.any(np.asarray(ranked_labels)[:k] == 1))


def rank_labels(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Reorder each row's labels by descending score (ties keep candidate order)."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return np.take_along_axis(labels, order, axis=1)


@dataclass
class MetricsReport:
    auc: float
    ndcg: dict[int, float]
    hit_rate: float
    n_sessions: int
    n_impressions: int
    std: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def as_rows(self) -> list[tuple[str, float, float]]:
        rows = [("AUC", self.auc, self.std.get("auc", 0.0))]
        rows += [(f"NDCG@{k}", v, self.std.get(f"ndcg@{k}", 0.0)) for k, v in self.ndcg.items()]
        rows.append((f"Hit Rate@{HIT_K}", self.hit_rate, self.std.get(f"hit_rate@{HIT_K}", 0.0)))
        return rows

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            **{f"ndcg@{k}": v for k, v in self.ndcg.items()},
            f"hit_rate@{HIT_K}": self.hit_rate,
            "n_sessions": self.n_sessions,
            "n_impressions": self.n_impressions,
            "std": self.std,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self, name: str = "model") -> str:
        width = max(len(r[0]) for r in self.as_rows())
        lines = [f"{'Metric':<{width}}  {name}"]
        lines += [f"{label:<{width}}  {mean:.3f}±{sd:.3f}" for label, mean, sd in self.as_rows()]
        return "\n".join(lines) + "\n"


def make_test_sets(env: Environment, seeds, n_sessions: int) -> list[EpisodeBatch]:
    """Uniform-logger sessions with click outcomes for every candidate, one set per seed."""
    out = []
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
        users = rng.integers(env.spec.n_users, size=n_sessions)
        out.append(simulate_sessions(env, users, None, rng, full_feedback=True))
    return out


def policy_scores(policy, batch: EpisodeBatch, chunk: int = 8192) -> np.ndarray:
    """log pi(c | s) for every candidate of every step."""
    parts = []
    for lo in range(0, len(batch), chunk):
        idx = np.arange(lo, min(len(batch), lo + chunk))
        logits, _ = policy.forward(batch.states.take(idx), batch.candidates[idx])
        parts.append(log_softmax(logits))
    return np.concatenate(parts)


def oracle_scores(env: Environment, batch: EpisodeBatch) -> np.ndarray:
    return env.click_prob[batch.user_ids[batch.episode][:, None], batch.candidates]


def set_metrics(scores: np.ndarray, labels: np.ndarray, ks=NDCG_KS) -> dict[str, float]:
    ranked = rank_labels(scores, labels)
    with_pos = ranked.sum(axis=1) > 0
    lists = ranked[with_pos]
    out = {"auc": auc(scores.ravel(), labels.ravel())}
    for k in ks:
        out[f"ndcg@{k}"] = float(np.mean([ndcg_at_k(r, k) for r in lists]))
    out[f"hit_rate@{HIT_K}"] = float(np.mean([hit_rate_at_k(r, HIT_K) for r in lists]))
    return out


def offline_eval(model, test_sets, ks=NDCG_KS) -> MetricsReport:
    """Mean and std of the metrics over test sets (one per evaluation seed).

    ``model`` is a Policy or a callable ``batch -> scores [n, C]``. AUC is
    pooled over all impressions of a set; list metrics are averaged over
    steps whose candidate list holds at least one click.
    """
    if not test_sets or any(len(t) == 0 for t in test_sets):
        raise ValueError("offline evaluation needs nonempty test sets")
    score_fn = model if callable(model) and not hasattr(model, "forward") else (lambda b: policy_scores(model, b))
    per_set = []
    for batch in test_sets:
        if batch.labels is None:
            raise ValueError("test sessions must carry per-candidate labels")
        per_set.append(set_metrics(score_fn(batch), batch.labels, ks))
    keys = list(per_set[0])
    mean = {k: float(np.mean([m[k] for m in per_set])) for k in keys}
    std = {k: float(np.std([m[k] for m in per_set])) for k in keys}
    return MetricsReport(
        auc=mean["auc"],
        ndcg={k: mean[f"ndcg@{k}"] for k in ks},
        hit_rate=mean[f"hit_rate@{HIT_K}"],
        n_sessions=int(sum(t.n_episodes for t in test_sets)),
        n_impressions=int(sum(t.candidates.size for t in test_sets)),
        std=std,
        meta={"auc_pooling": "global over impressions", "list_metrics": "steps with >=1 click",
              "n_eval_sets": len(test_sets)},
    )


def sweep_table_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("aoi_level", "auc_mean", "auc_std"))
    for level, mean, sd in rows:
        w.writerow((level, repr(float(mean)), repr(float(sd))))
    return buf.getvalue()


def sensitivity_sweep(levels, run_fn) -> list[tuple[int, float, float]]:
    """Train and evaluate once per AOI level.

    ``run_fn(level) -> MetricsReport`` performs the full train+eval for one
    level with fixed seeds. Returns rows (level, mean AUC, AUC std).
    """
    rows = []
    for level in levels:
        if not 1 <= int(level) <= 5:
            raise ValueError(f"AOI level must be in 1..5, got {level}")
        report = run_fn(int(level))
        rows.append((int(level), report.auc, report.std.get("auc", 0.0)))
    return rows
