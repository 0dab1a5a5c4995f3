"""Recognition model sigma_phi(h | s): group assignment from g and the E-step updates."""

from __future__ import annotations

import numpy as np

from .numerics import ParamStore, cosine_matrix, log_softmax, softmax
from .policy import Dense, Discrete, ModelConfig


def sse(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(np.sum((points - centroids[labels]) ** 2))


def nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """argmin_k ||x - c_k||, lowest index on ties."""
    d2 = np.empty((points.shape[0], centroids.shape[0]))
    for k, c in enumerate(centroids):
        d2[:, k] = np.sum((points - c) ** 2, axis=1)
    return np.argmin(d2, axis=1)


def kmeans_pp_init(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centers)


def lloyd(points: np.ndarray, centroids: np.ndarray, max_iters: int, history: list | None = None):
    """Lloyd iterations from the given centroids.

    An emptied cluster is reseeded at the point farthest from its assigned
    centroid. Stops when assignments stop changing. Returns (centroids, labels).
    """
    centroids = np.array(centroids, dtype=float)
    K = centroids.shape[0]
    labels = nearest(points, centroids)
    if history is not None:
        history.append(sse(points, centroids, labels))
    for _ in range(max_iters):
        new = centroids.copy()
        for k in range(K):
            members = points[labels == k]
            if len(members):
                new[k] = members.mean(axis=0)
        empty = [k for k in range(K) if not np.any(labels == k)]
        for k in empty:
            far = int(np.argmax(np.sum((points - new[labels]) ** 2, axis=1)))
            new[k] = points[far]
            labels = labels.copy()
            labels[far] = k
        centroids = new
        new_labels = nearest(points, centroids)
        if history is not None:
            history.append(sse(points, centroids, new_labels))
        if np.array_equal(new_labels, labels) and not empty:
            break
        labels = new_labels
    return centroids, labels


def kmeans_fit(points, K: int, max_iters: int = 100, seed: int = 0, history: list | None = None) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding."""
    points = np.asarray(points, dtype=float)
    if points.shape[0] < K:
        raise ValueError(f"kmeans needs at least K={K} points, got {points.shape[0]}")
    rng = np.random.default_rng(seed)
    init = kmeans_pp_init(points, K, rng)
    centroids, _ = lloyd(points, init, max_iters, history)
    return centroids


# ---------------------------------------------------------------- assignment

def assign_batch(G: np.ndarray, store: ParamStore, cfg: ModelConfig):
    if cfg.variant == "kmeans":
        return nearest(G, store["grp.centroids"])
    if cfg.variant == "proto":
        return np.argmax(cosine_matrix(G, store["grp.prototypes"]), axis=1)
    if cfg.variant == "can":
        return G @ store["grp.L"].T
    return None


def assign(g, store: ParamStore, cfg: ModelConfig):
    """Group indicator for a single g vector."""
    out = assign_batch(np.asarray(g, dtype=float)[None, :], store, cfg)
    if cfg.variant in ("kmeans", "proto"):
        return Discrete(int(out[0]))
    if cfg.variant == "can":
        return Dense(out[0])
    raise ValueError("the ungrouped ablation has no group indicator")


# ---------------------------------------------------------------- E-step

def proto_log_likelihood(G: np.ndarray, prototypes: np.ndarray, temperature: float, k_hat=None) -> float:
    """(1/N) sum log q(k_hat | s) with q = softmax(cos(g, p_k) / T)."""
    cos = cosine_matrix(G, prototypes)
    if k_hat is None:
        k_hat = np.argmax(cos, axis=1)
    return float(np.mean(log_softmax(cos / temperature)[np.arange(len(G)), k_hat]))


def proto_log_likelihood_grad(G: np.ndarray, prototypes: np.ndarray, temperature: float, k_hat) -> np.ndarray:
    """Gradient of proto_log_likelihood with respect to the prototypes (k_hat held fixed)."""
    N = G.shape[0]
    ng = np.linalg.norm(G, axis=1)
    npk = np.linalg.norm(prototypes, axis=1)
    cos = (G @ prototypes.T) / np.outer(ng, npk)
    q = softmax(cos / temperature)
    onehot = np.zeros_like(q)
    onehot[np.arange(N), k_hat] = 1.0
    dcos = (onehot - q) / (temperature * N)  # [N, K]
    # d cos(g, p) / d p = g / (|g||p|) - cos * p / |p|^2
    gn = G / ng[:, None]
    term1 = dcos.T @ gn / npk[:, None]
    term2 = (dcos * cos).sum(axis=0)[:, None] * prototypes / (npk**2)[:, None]
    return term1 - term2


def e_step(G: np.ndarray, store: ParamStore, cfg: ModelConfig, step_size: float | None = None) -> float:
    """Update phi in place on a batch of g vectors; returns the E-step objective.

    kmeans: warm-started Lloyd refit (returns SSE). proto: one ascent step on
    the mean log-likelihood of the current assignment (returns the objective
    after the step). can: no-op (returns 0.0).
    """
    G = np.asarray(G, dtype=float)
    if G.shape[0] == 0:
        raise ValueError("E-step needs a nonempty batch")
    if cfg.variant == "kmeans":
        centroids, labels = lloyd(G, store["grp.centroids"], cfg.kmeans_max_iters)
        store.params["grp.centroids"][...] = centroids
        return sse(G, centroids, labels)
    if cfg.variant == "proto":
        P = store["grp.prototypes"]
        step = cfg.proto_lr if step_size is None else step_size
        k_hat = np.argmax(cosine_matrix(G, P), axis=1)
        P += step * proto_log_likelihood_grad(G, P, cfg.temperature, k_hat)
        return proto_log_likelihood(G, P, cfg.temperature, k_hat)
    return 0.0
