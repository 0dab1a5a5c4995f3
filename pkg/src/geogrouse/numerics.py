"""Dense float64 kernels with hand-derived backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 (row-major).
Every learnable quantity of the model lives in a :class:`ParamStore`, which
keeps a gradient buffer of identical shape next to each parameter.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterator

import numpy as np


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class ParamStore:
    """Named float64 parameters with parallel gradient accumulators."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0 or any(d < 1 for d in arr.shape):
            raise ShapeError(f"parameter {name!r} needs positive dims, got {arr.shape}")
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        buf = self.grads[name]
        if grad.shape != buf.shape:
            raise ShapeError(f"gradient for {name!r} has shape {grad.shape}, expected {buf.shape}")
        buf += grad

    def grad_norm(self, names=None) -> float:
        names = self.names() if names is None else names
        return float(np.sqrt(sum(float(np.sum(self.grads[n] ** 2)) for n in names)))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self.params.items():
            out.params[name] = value.copy()
            out.grads[name] = self.grads[name].copy()
        return out

    def equal(self, other: "ParamStore") -> bool:
        """Bit-exact comparison of parameter values."""
        if self.names() != other.names():
            return False
        return all(np.array_equal(self.params[n], other.params[n]) for n in self.params)

    def to_dict(self) -> dict:
        return {
            name: {"shape": list(v.shape), "data": v.ravel().tolist()}
            for name, v in self.params.items()
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ParamStore":
        store = cls()
        for name, entry in payload.items():
            shape = tuple(int(d) for d in entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
            if data.size != int(np.prod(shape)):
                raise ShapeError(
                    f"parameter {name!r}: {data.size} values do not fill shape {list(shape)}"
                )
            store.add(name, data.reshape(shape))
        return store

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_dict(json.loads(Path(path).read_text()))


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = x W + b for x of shape [n, d_in]."""
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ShapeError(
            f"affine: x{list(x.shape)} @ W{list(W.shape)} + b{list(b.shape)} do not conform"
        )
    return x @ W + b


def affine_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Returns (dx, dW, db) for y = x W + b."""
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


def tanh_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    # y is the tanh output
    return dy * (1.0 - y * y)


def softmax(z, axis: int = -1) -> np.ndarray:
    z = as_tensor(z)
    if z.size == 0 or z.shape[axis] == 0:
        raise ShapeError("softmax of an empty tensor")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z = as_tensor(z)
    if z.size == 0 or z.shape[axis] == 0:
        raise ShapeError("log_softmax of an empty tensor")
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def masked_softmax(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``; all-masked rows give zeros."""
    z = np.where(mask, z, -np.inf)
    top = z.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(z - top), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def softmax_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def cosine_sim(u, v) -> float:
    u = as_tensor(u)
    v = as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_sim: shapes {list(u.shape)} and {list(v.shape)} differ")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_matrix(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between rows of X [n,d] and rows of Y [k,d]."""
    nx = np.linalg.norm(X, axis=1)
    ny = np.linalg.norm(Y, axis=1)
    if np.any(nx == 0.0) or np.any(ny == 0.0):
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return (X @ Y.T) / np.outer(nx, ny)


def discounted_return(rewards, gamma: float) -> list[float]:
    """G_t = r_t + gamma * G_{t+1}, computed right to left."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    out = [0.0] * len(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = float(rewards[t]) + gamma * running
        out[t] = running
    return out


def scatter_add(table_grad: np.ndarray, ids: np.ndarray, values: np.ndarray) -> None:
    """table_grad[ids[i]] += values[i], summed in index order (deterministic)."""
    ids = np.asarray(ids).ravel()
    if ids.size == 0:
        return
    values = values.reshape(ids.size, -1)
    n_rows = table_grad.shape[0]
    flat = table_grad.reshape(n_rows, -1)
    for j in range(flat.shape[1]):
        flat[:, j] += np.bincount(ids, weights=values[:, j], minlength=n_rows)


def grad_check(
    f: Callable[[ParamStore], float],
    store: ParamStore,
    eps: float = 1e-5,
    names=None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(store)`` must return a scalar and accumulate its analytic gradient into
    ``store.grads``. When ``max_coords`` is set, that many coordinates per
    parameter are sampled (with ``rng``) instead of checking all of them.
    """
    names = store.names() if names is None else list(names)
    store.zero_grads()
    base = f(store)
    if not np.isfinite(base):
        raise NumericalError(f"objective is not finite: {base}")
    analytic = {n: store.grads[n].copy() for n in names}
    worst = 0.0
    for name in names:
        param = store.params[name]
        coords = np.arange(param.size)
        if max_coords is not None and param.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(param.size, size=max_coords, replace=False))
        flat = param.reshape(-1)
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            f_plus = f(store)
            flat[i] = old - eps
            f_minus = f(store)
            flat[i] = old
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError(f"objective not finite while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    store.zero_grads()
    for n in names:
        store.grads[n][...] = analytic[n]
    return worst
