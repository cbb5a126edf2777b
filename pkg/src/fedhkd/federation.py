"""Client objective, local training and the server round loop.

All five algorithms share one code path and differ only in which
regularizers :func:`local_loss` adds and whether hyper-knowledge is
exchanged:

=============  ==============================================================
fedavg         cross-entropy
fedprox        cross-entropy + mu_prox/2 * ||theta - theta_global||^2
fedproto       cross-entropy + lam_proto * mean_k ||h_k - H[y_k]||
fedhkd         cross-entropy + lam * mean_j ||Q(G(H_j), T) - Q_j|| + gamma * mean_k ||h_k - H[y_k]||
fedhkd_star    fedhkd with gamma = 0
=============  ==============================================================
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .hyperknowledge import (
    DpConfig,
    GlobalHyperKnowledge,
    aggregate_hk,
    compute_local_hk,
    privatize,
)
from .model import SplitModel, backprop_layers, forward, run_layers
from .numerics import AdamState, NonFiniteError, adam_step, cross_entropy, softmax
from . import _kernels

ALGORITHMS = ("fedavg", "fedprox", "fedproto", "fedhkd", "fedhkd_star")

# stream tags for per-(round, client) generators
_SELECT, _SHUFFLE, _NOISE = 1, 2, 3


@dataclass(frozen=True)
class AlgoSpec:
    kind: str = "fedhkd"
    lam: float = 0.0
    gamma: float = 0.0
    mu_prox: float = 0.0
    lam_proto: float = 0.0
    # divide the soft-prediction term by the number of present classes (else by n)
    present_norm: bool = True

    def __post_init__(self):
        if self.kind not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.kind!r}; choose from {ALGORITHMS}")
        for name in ("lam", "gamma", "mu_prox", "lam_proto"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.kind == "fedavg" and (self.lam or self.gamma):
            raise ValueError("fedavg requires lam = gamma = 0")
        if self.kind == "fedhkd_star" and self.gamma:
            raise ValueError("fedhkd_star requires gamma = 0")

    @classmethod
    def default(cls, kind: str) -> "AlgoSpec":
        return {
            "fedavg": cls("fedavg"),
            "fedprox": cls("fedprox", mu_prox=0.5),
            "fedproto": cls("fedproto", lam_proto=0.05),
            "fedhkd": cls("fedhkd", lam=0.05, gamma=0.05),
            "fedhkd_star": cls("fedhkd_star", lam=0.05),
        }[kind]

    @property
    def shares_knowledge(self) -> bool:
        return self.kind in ("fedproto", "fedhkd", "fedhkd_star")

    @property
    def keeps_local_models(self) -> bool:
        return self.kind == "fedproto"

    def _coefs(self):
        """(soft-prediction weight, representation weight, proximal weight)."""
        if self.kind in ("fedhkd", "fedhkd_star"):
            return self.lam, self.gamma, 0.0
        if self.kind == "fedproto":
            return 0.0, self.lam_proto, 0.0
        if self.kind == "fedprox":
            return 0.0, 0.0, self.mu_prox
        return 0.0, 0.0, 0.0


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    decay: float = 0.5
    decay_every: int = 10
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0 or not 0 < self.decay <= 1 or self.decay_every < 1:
            raise ValueError("need lr > 0, 0 < decay <= 1, decay_every >= 1")

    def lr_at(self, round: int) -> float:
        """Learning rate for global round ``round`` (1-based)."""
        return self.lr * self.decay ** ((max(round, 1) - 1) // self.decay_every)


def local_loss(algo: AlgoSpec, x, y, model: SplitModel, K: GlobalHyperKnowledge | None,
               temperature: float = 0.5, global_params=None, *, update_stats: bool = True):
    """Client objective on one mini-batch and its gradient.

    Returns ``(loss, grads)`` with ``grads`` aligned to ``model.trainable_params()``.
    ``global_params`` (the round's starting weights) is only read by fedprox.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    b = len(y)
    if b == 0:
        raise ValueError("empty batch")
    lam, rep_w, prox_w = algo._coefs()
    have_k = K is not None and len(K) > 0

    h, ecache = run_layers(model.extractor, x, "train", update_stats)
    z, ccache = run_layers(model.classifier, h, "train", update_stats)
    loss, dz = cross_entropy(softmax(z), y)
    dh, cgrads = backprop_layers(model.classifier, ccache, dz)

    if rep_w > 0 and have_k:
        mask = np.fromiter((int(c) in K.entries for c in y), dtype=bool, count=b)
        if mask.any():
            H = np.array([K.entries[int(c)][0] for c in y[mask]])
            diff = h[mask] - H
            norms = np.sqrt((diff * diff).sum(axis=1))
            loss += rep_w * norms.sum() / b
            safe = np.where(norms > 0, norms, 1.0)
            dh[mask] += (rep_w / b) * diff / safe[:, None]

    if lam > 0 and have_k:
        reps, targets = K.reps(), K.softs()
        denom = len(reps) if algo.present_norm else K.n_classes
        zk, kcache = run_layers(model.classifier, reps, "train", update_stats)
        qk = softmax(zk, temperature)
        diff = qk - targets
        norms = np.sqrt((diff * diff).sum(axis=1))
        loss += lam * norms.sum() / denom
        gq = (lam / denom) * diff / np.where(norms > 0, norms, 1.0)[:, None]
        dzk = qk * (gq - (gq * qk).sum(axis=1, keepdims=True)) / temperature
        _, kgrads = backprop_layers(model.classifier, kcache, dzk)
        cgrads = [{k: g[k] + kg[k] for k in g} for g, kg in zip(cgrads, kgrads)]

    _, egrads = backprop_layers(model.extractor, ecache, dh)
    grads = [g[k] for layer, g in zip(model.layers, egrads + cgrads) for k in layer.trainable]

    if prox_w > 0:
        if global_params is None:
            raise ValueError("fedprox needs the round's global parameters")
        for i, (p, p0) in enumerate(zip(model.trainable_params(), global_params)):
            d = p - p0
            loss += 0.5 * prox_w * float((d * d).sum())
            grads[i] = grads[i] + prox_w * d

    if not math.isfinite(loss):
        raise NonFiniteError(f"non-finite local loss ({loss}) for {algo.kind} on batch of {b}")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {i} ({algo.kind}, batch of {b})")
    return float(loss), grads


@dataclass
class ClientUpdate:
    client_id: int
    model: SplitModel
    knowledge: dict
    n_samples: int
    mean_loss: float


def client_rng(seed: int, round: int, tag: int, client: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, round, tag, client]))


def local_update(global_model: SplitModel, K, train: Dataset, algo: AlgoSpec, epochs: int = 5,
                 batch_size: int = 64, lr: float = 1e-3, optim: OptimConfig = OptimConfig(),
                 dp: DpConfig = DpConfig(), nu: float = 0.25, temperature: float = 0.5,
                 shuffle_rng: np.random.Generator | None = None,
                 noise_rng: np.random.Generator | None = None, client_id: int = 0) -> ClientUpdate:
    """Train a copy of ``global_model`` on ``train`` and extract its hyper-knowledge.

    A trailing mini-batch of one sample is skipped (batchnorm needs two).
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    shuffle_rng = shuffle_rng if shuffle_rng is not None else np.random.default_rng(0)
    noise_rng = noise_rng if noise_rng is not None else np.random.default_rng(1)
    model = global_model.copy()
    params = model.trainable_params()
    start = [p.copy() for p in params] if algo._coefs()[2] > 0 else None
    state = AdamState.for_params(params, lr, optim.beta1, optim.beta2, optim.eps)
    n = len(train)
    losses = []
    for _ in range(epochs):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            if len(idx) < 2:
                continue
            loss, grads = local_loss(algo, train.inputs[idx], train.labels[idx], model, K,
                                     temperature, start)
            adam_step(params, grads, state)
            model.touch()
            losses.append(loss)

    knowledge = {}
    if algo.shares_knowledge:
        local = compute_local_hk(model, train, nu, temperature, dp.zeta)
        knowledge = {j: privatize(hk, dp, noise_rng) for j, hk in sorted(local.items())}
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return ClientUpdate(client_id, model, knowledge, n, mean_loss)


def aggregate_models(models, sizes) -> list[np.ndarray]:
    """Size-weighted average of state arrays. ``models`` holds SplitModels or array lists."""
    states = [m.state_arrays() if isinstance(m, SplitModel) else list(m) for m in models]
    if not states:
        raise ValueError("nothing to aggregate")
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.shape != (len(states),) or sizes.sum() <= 0 or (sizes < 0).any():
        raise ValueError("sizes must be non-negative, one per model, with positive total")
    w = sizes / sizes.sum()
    out = []
    for k in range(len(states[0])):
        shapes = {np.shape(s[k]) for s in states}
        if len(shapes) != 1 or any(len(s) != len(states[0]) for s in states):
            raise ValueError(f"parameter {k}: shape mismatch across clients {sorted(shapes)}")
        out.append(_kernels.weighted_sum(np.array([s[k] for s in states], dtype=np.float64), w))
    return out


def select_clients(m: int, mu: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of ``floor(m * mu)`` client ids without replacement, sorted."""
    if not 0 < mu <= 1:
        raise ValueError("participation rate must lie in (0, 1]")
    k = math.floor(m * mu + 1e-9)
    if k < 1:
        raise ValueError(f"floor({m} * {mu}) = 0 clients selected")
    return np.sort(rng.choice(m, size=k, replace=False))


def evaluate(model: SplitModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    z = forward(model, dataset.inputs, "eval")
    return float(np.mean(np.argmax(z, axis=1) == dataset.labels))


@dataclass
class RoundConfig:
    """Everything a round needs besides the evolving state."""

    clients: list  # per-client training Datasets
    algo: AlgoSpec = AlgoSpec.default("fedhkd")
    epochs: int = 5
    batch_size: int = 64
    participation: float = 1.0
    optim: OptimConfig = OptimConfig()
    dp: DpConfig = DpConfig()
    nu: float = 0.25
    temperature: float = 0.5
    workers: int = 1


@dataclass
class FederationState:
    global_model: SplitModel
    knowledge: GlobalHyperKnowledge
    round: int = 0
    local_models: dict = field(default_factory=dict)
    seed: int = 0
    last_loss: float = float("nan")
    last_selected: tuple = ()

    @classmethod
    def initial(cls, model: SplitModel, seed: int = 0) -> "FederationState":
        return cls(model, GlobalHyperKnowledge(model.n_classes, model.repr_dim, 0), 0, {}, seed)

    def client_model(self, i: int) -> SplitModel:
        return self.local_models.get(i, self.global_model)


def run_round(state: FederationState, config: RoundConfig) -> FederationState:
    """One server round: sample, train locally, aggregate models and hyper-knowledge."""
    t = state.round + 1
    algo = config.algo
    selected = select_clients(len(config.clients), config.participation,
                              client_rng(state.seed, t, _SELECT))
    K = state.knowledge if algo.shares_knowledge else None
    lr = config.optim.lr_at(t)

    def work(i):
        i = int(i)
        start = state.local_models.get(i, state.global_model) if algo.keeps_local_models \
            else state.global_model
        return local_update(start, K, config.clients[i], algo, config.epochs, config.batch_size,
                            lr, config.optim, config.dp, config.nu, config.temperature,
                            client_rng(state.seed, t, _SHUFFLE, i),
                            client_rng(state.seed, t, _NOISE, i), i)

    if config.workers > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            updates = list(pool.map(work, selected))
    else:
        updates = [work(i) for i in selected]

    new_global = state.global_model.copy()
    new_global.load_state(aggregate_models([u.model for u in updates],
                                           [u.n_samples for u in updates]))
    if algo.shares_knowledge:
        K_new = aggregate_hk([(u.client_id, u.knowledge) for u in updates],
                             new_global.n_classes, new_global.repr_dim, t)
    else:
        K_new = replace(state.knowledge, round=t, entries={})
    local_models = dict(state.local_models)
    local_models.update({u.client_id: u.model for u in updates})
    losses = [u.mean_loss for u in updates if math.isfinite(u.mean_loss)]
    return FederationState(new_global, K_new, t, local_models, state.seed,
                           float(np.mean(losses)) if losses else float("nan"),
                           tuple(int(i) for i in selected))
