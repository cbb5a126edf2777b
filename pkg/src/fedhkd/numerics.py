"""Layers with explicit forward/backward passes, softmax/cross-entropy and Adam.

Tensors are plain ``float64`` numpy arrays; a batch is always the leading
axis. Nothing here touches global state: a forward pass returns an opaque
cache that the matching backward pass consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Input shape does not match what a layer or model expects."""

    def __init__(self, where: str, expected, actual):
        self.where = where
        self.expected = expected
        self.actual = actual
        super().__init__(f"{where}: expected shape {expected}, got {actual}")


class CacheError(RuntimeError):
    """A backward pass was handed a cache from a different or outdated forward pass."""


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or Inf."""


LAYER_KINDS = ("dense", "relu", "batchnorm")


@dataclass(eq=False)
class Layer:
    kind: str
    params: dict = field(default_factory=dict)
    dim: int = 0
    momentum: float = 0.1
    eps: float = 1e-5
    # bumped whenever trainable params change; invalidates outstanding caches
    version: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def trainable(self) -> tuple[str, ...]:
        if self.kind == "dense":
            return ("weight", "bias")
        if self.kind == "batchnorm":
            return ("scale", "shift")
        return ()

    @property
    def buffers(self) -> tuple[str, ...]:
        return ("running_mean", "running_var") if self.kind == "batchnorm" else ()

    @property
    def in_dim(self) -> int | None:
        if self.kind == "dense":
            return self.params["weight"].shape[0]
        return self.dim or None

    @property
    def out_dim(self) -> int | None:
        if self.kind == "dense":
            return self.params["weight"].shape[1]
        return self.dim or None

    def copy(self) -> "Layer":
        return Layer(
            self.kind,
            {k: v.copy() for k, v in self.params.items()},
            self.dim,
            self.momentum,
            self.eps,
        )

    def __repr__(self) -> str:
        return f"Layer({self.kind}, in={self.in_dim}, out={self.out_dim})"


def dense(in_dim: int, out_dim: int, rng: np.random.Generator | None = None) -> Layer:
    """Fully connected layer; uniform(+-1/sqrt(in_dim)) init, zeros if ``rng`` is None."""
    if rng is None:
        w = np.zeros((in_dim, out_dim))
        b = np.zeros(out_dim)
    else:
        bound = 1.0 / np.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        b = rng.uniform(-bound, bound, size=out_dim)
    return Layer("dense", {"weight": w, "bias": b})


def relu(dim: int = 0) -> Layer:
    return Layer("relu", dim=dim)


def batchnorm(dim: int, momentum: float = 0.1, eps: float = 1e-5) -> Layer:
    params = {
        "scale": np.ones(dim),
        "shift": np.zeros(dim),
        "running_mean": np.zeros(dim),
        "running_var": np.ones(dim),
    }
    return Layer("batchnorm", params, dim=dim, momentum=momentum, eps=eps)


@dataclass(frozen=True)
class ForwardCache:
    layer_id: int
    version: int
    kind: str
    mode: str
    data: tuple


def _check_input(layer: Layer, x: np.ndarray, name: str) -> None:
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(name, "(batch>=1, features)", x.shape)
    want = layer.in_dim
    if want is not None and x.shape[1] != want:
        raise ShapeError(name, (x.shape[0], want), x.shape)


def layer_forward(layer: Layer, x: np.ndarray, mode: str = "train", *,
                  update_stats: bool = True, name: str | None = None):
    """Run one layer. Returns ``(output, cache)``.

    In train mode a batchnorm layer normalizes with the batch's population
    variance and, unless ``update_stats`` is False, folds the batch
    statistics into its running averages.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    name = name or layer.kind
    _check_input(layer, x, name)

    if layer.kind == "dense":
        p = layer.params
        out = x @ p["weight"] + p["bias"]
        data = (x,)
    elif layer.kind == "relu":
        mask = x > 0
        out = np.where(mask, x, 0.0)
        data = (mask,)
    else:
        p = layer.params
        if mode == "train":
            if x.shape[0] < 2:
                raise ShapeError(name, "batch >= 2 in train mode", x.shape)
            out, xhat, mean, var, inv_std = _kernels.bn_forward(
                np.ascontiguousarray(x), p["scale"], p["shift"], layer.eps)
            if update_stats:
                mom = layer.momentum
                p["running_mean"] = (1.0 - mom) * p["running_mean"] + mom * mean
                p["running_var"] = (1.0 - mom) * p["running_var"] + mom * var
            data = (xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(p["running_var"] + layer.eps)
            xhat = (x - p["running_mean"]) * inv_std
            out = xhat * p["scale"] + p["shift"]
            data = (xhat, inv_std)
    return out, ForwardCache(id(layer), layer.version, layer.kind, mode, data)


def layer_backward(layer: Layer, cache: ForwardCache, output_grad: np.ndarray):
    """Backpropagate through one layer. Returns ``(input_grad, param_grads)``."""
    if not isinstance(cache, ForwardCache) or cache.layer_id != id(layer) or cache.kind != layer.kind:
        raise CacheError(f"cache does not belong to {layer!r}")
    if cache.version != layer.version:
        raise CacheError(f"stale cache for {layer!r}: parameters changed since forward")
    if cache.mode != "train":
        raise CacheError("backward requires a train-mode forward cache")

    if layer.kind == "dense":
        (x,) = cache.data
        if output_grad.shape != (x.shape[0], layer.out_dim):
            raise ShapeError("dense backward", (x.shape[0], layer.out_dim), output_grad.shape)
        grads = {"weight": x.T @ output_grad, "bias": output_grad.sum(axis=0)}
        return output_grad @ layer.params["weight"].T, grads
    if layer.kind == "relu":
        (mask,) = cache.data
        if output_grad.shape != mask.shape:
            raise ShapeError("relu backward", mask.shape, output_grad.shape)
        return np.where(mask, output_grad, 0.0), {}

    xhat, inv_std = cache.data
    if output_grad.shape != xhat.shape:
        raise ShapeError("batchnorm backward", xhat.shape, output_grad.shape)
    dx, dscale, dshift = _kernels.bn_backward(
        np.ascontiguousarray(output_grad), xhat, layer.params["scale"], inv_std)
    return dx, {"scale": dscale, "shift": dshift}


def softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``z / temperature`` with max-subtraction."""
    z = np.asarray(z, dtype=np.float64)
    squeeze = z.ndim == 1
    z2 = np.ascontiguousarray(z.reshape(1, -1) if squeeze else z)
    if not np.all(np.isfinite(z2)):
        raise NonFiniteError("softmax input contains NaN or Inf")
    out = _kernels.softmax_rows(z2, 1.0 / temperature)
    return out[0] if squeeze else out


def cross_entropy(probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Batch-mean ``-log p[label]`` and its gradient w.r.t. the softmax logits."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, n = probs.shape
    if labels.shape != (b,):
        raise ShapeError("cross_entropy labels", (b,), labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"label out of range [0, {n})")
    rows = np.arange(b)
    picked = np.maximum(probs[rows, labels], np.finfo(np.float64).tiny)
    loss = float(-np.log(picked).mean())
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad /= b
    return loss, grad


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.5, beta2=0.999, eps=1e-8) -> "AdamState":
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, beta1, beta2, eps, lr)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and Adam moments differ in length")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        _kernels.adam_update(p, np.ascontiguousarray(g, dtype=np.float64), m, v,
                             state.lr, state.beta1, state.beta2, state.eps, bc1, bc2)
    return params, state
