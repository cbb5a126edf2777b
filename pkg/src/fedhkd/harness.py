"""Experiment configuration, the multi-seed runner, metrics files and model checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, PartitionSpec, gen_blobs, load_idx, partition_dirichlet, split_local
from .federation import (
    ALGORITHMS,
    AlgoSpec,
    FederationState,
    OptimConfig,
    RoundConfig,
    evaluate,
    run_round,
)
from .hyperknowledge import DpConfig
from .model import SplitModel, build_model, forward
from .numerics import Layer, cross_entropy, softmax

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


# Flat dotted keys. ``None`` for algo.* means "the algorithm's own default".
DEFAULTS: dict = {
    "dataset.kind": "blobs",
    "dataset.n_classes": 10,
    "dataset.dim": 16,
    "dataset.samples": 800,
    "dataset.spread": 0.2,
    "dataset.separation": 1.0,
    "dataset.test_per_class": 100,
    "dataset.train_images": None,
    "dataset.train_labels": None,
    "dataset.test_images": None,
    "dataset.test_labels": None,
    "clients": 10,
    "beta": 0.5,
    "algo.kind": "fedhkd",
    "algo.lam": None,
    "algo.gamma": None,
    "algo.mu_prox": None,
    "algo.lam_proto": None,
    "algo.present_norm": True,
    "rounds": 50,
    "epochs": 5,
    "batch_size": 64,
    "participation": 1.0,
    "nu": 0.25,
    "temperature": 0.5,
    "dp.enabled": True,
    "dp.zeta": 3.0,
    "dp.sigma": 7.0,
    "dp.epsilon": 0.5,
    "dp.delta": 0.01,
    "optim.lr": 1e-3,
    "optim.decay": 0.5,
    "optim.decay_every": 10,
    "optim.beta1": 0.5,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    "model.repr_dim": 8,
    "model.hidden": 32,
    "seeds": [0],
    "out": "runs/default",
    "workers": 1,
    "timing": False,
    "checkpoint": True,
    "dump_hk_rounds": [],
}


def _flatten(doc: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


@dataclass
class ExperimentConfig:
    dataset: dict
    n_clients: int
    beta: float
    algo: AlgoSpec
    rounds: int
    epochs: int
    batch_size: int
    participation: float
    dp: DpConfig
    nu: float
    temperature: float
    optim: OptimConfig
    repr_dim: int
    hidden: int
    seeds: list
    out: str
    workers: int = 1
    timing: bool = False
    checkpoint: bool = True
    dump_hk_rounds: list = field(default_factory=list)

    def to_flat(self) -> dict:
        flat = {f"dataset.{k}": v for k, v in self.dataset.items()}
        flat.update({f"algo.{k}": v for k, v in asdict(self.algo).items()})
        flat.update({f"dp.{k}": v for k, v in asdict(self.dp).items()})
        flat.update({f"optim.{k}": v for k, v in asdict(self.optim).items()})
        flat.update({
            "clients": self.n_clients, "beta": self.beta, "rounds": self.rounds,
            "epochs": self.epochs, "batch_size": self.batch_size,
            "participation": self.participation, "nu": self.nu,
            "temperature": self.temperature, "model.repr_dim": self.repr_dim,
            "model.hidden": self.hidden, "seeds": list(self.seeds), "out": self.out,
            "workers": self.workers, "timing": self.timing, "checkpoint": self.checkpoint,
            "dump_hk_rounds": list(self.dump_hk_rounds),
        })
        return flat


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Build a validated config from a JSON file and/or override mapping.

    Precedence: built-in defaults < file < ``overrides``. Nested objects in
    the file are accepted and flattened to dotted keys. Unknown keys raise
    :class:`ConfigError`.
    """
    flat = dict(DEFAULTS)
    for source in (_read_json(path) if path else {}, overrides or {}):
        for key, value in _flatten(source).items():
            if key not in DEFAULTS:
                raise ConfigError(key, "unknown configuration key")
            flat[key] = value
    return _build(flat)


def _read_json(path) -> dict:
    text = Path(path).read_text()
    if not text.strip():
        return {}
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(str(path), "top level must be a JSON object")
    return doc


def _num(flat, key, kind=float, lo=None, hi=None, lo_open=False):
    v = flat[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(key, f"expected a number, got {v!r}")
    if kind is int and v != int(v):
        raise ConfigError(key, f"expected an integer, got {v!r}")
    v = kind(v)
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ConfigError(key, f"must be {'>' if lo_open else '>='} {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(key, f"must be <= {hi}, got {v}")
    return v


def _build(flat: dict) -> ExperimentConfig:
    kind = flat["dataset.kind"]
    if kind not in ("blobs", "idx"):
        raise ConfigError("dataset.kind", f"must be 'blobs' or 'idx', got {kind!r}")
    dataset = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("dataset.")}
    if kind == "blobs":
        dataset["n_classes"] = _num(flat, "dataset.n_classes", int, 2)
        dataset["dim"] = _num(flat, "dataset.dim", int, 1)
        dataset["samples"] = _num(flat, "dataset.samples", int, 1)
        dataset["spread"] = _num(flat, "dataset.spread", float, 0)
        dataset["separation"] = _num(flat, "dataset.separation", float, 0, lo_open=True)
        dataset["test_per_class"] = _num(flat, "dataset.test_per_class", int, 1)
        if dataset["samples"] < dataset["n_classes"]:
            raise ConfigError("dataset.samples", "must be at least dataset.n_classes")
    else:
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            if not dataset.get(k):
                raise ConfigError(f"dataset.{k}", "required when dataset.kind is 'idx'")

    m = _num(flat, "clients", int, 1)
    beta = _num(flat, "beta", float, 0, lo_open=True)
    mu = _num(flat, "participation", float, 0, 1, lo_open=True)
    if math.floor(m * mu + 1e-9) < 1:
        raise ConfigError("participation", f"floor({m} * {mu}) = 0 clients per round")

    algo_kind = flat["algo.kind"]
    if algo_kind not in ALGORITHMS:
        raise ConfigError("algo.kind", f"must be one of {ALGORITHMS}, got {algo_kind!r}")
    algo_fields = asdict(AlgoSpec.default(algo_kind))
    for k in ("lam", "gamma", "mu_prox", "lam_proto"):
        if flat[f"algo.{k}"] is not None:
            algo_fields[k] = _num(flat, f"algo.{k}", float, 0)
    algo_fields["present_norm"] = bool(flat["algo.present_norm"])
    try:
        algo = AlgoSpec(**algo_fields)
    except ValueError as exc:
        raise ConfigError("algo", str(exc)) from None

    enabled = bool(flat["dp.enabled"])
    sigma = _num(flat, "dp.sigma", float, 0)
    if enabled and sigma == 0:
        raise ConfigError("dp.sigma", "0 only allowed with dp.enabled = false")
    dp = DpConfig(
        zeta=_num(flat, "dp.zeta", float, 0, lo_open=True),
        sigma=sigma,
        epsilon=_num(flat, "dp.epsilon", float, 0, lo_open=True),
        delta=_num(flat, "dp.delta", float, 0, 1, lo_open=True),
        enabled=enabled,
    )
    if dp.delta >= 1:
        raise ConfigError("dp.delta", "must be < 1")

    beta1 = _num(flat, "optim.beta1", float, 0)
    beta2 = _num(flat, "optim.beta2", float, 0)
    if beta1 >= 1 or beta2 >= 1:
        raise ConfigError("optim.beta1" if beta1 >= 1 else "optim.beta2", "must be < 1")
    optim = OptimConfig(
        lr=_num(flat, "optim.lr", float, 0, lo_open=True),
        decay=_num(flat, "optim.decay", float, 0, 1, lo_open=True),
        decay_every=_num(flat, "optim.decay_every", int, 1),
        beta1=beta1,
        beta2=beta2,
        eps=_num(flat, "optim.eps", float, 0, lo_open=True),
    )

    seeds = flat["seeds"]
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ConfigError("seeds", "must be a non-empty list of non-negative integers")
    rounds_hk = flat["dump_hk_rounds"]
    if not isinstance(rounds_hk, list) or not all(isinstance(r, int) for r in rounds_hk):
        raise ConfigError("dump_hk_rounds", "must be a list of integers")

    return ExperimentConfig(
        dataset=dataset,
        n_clients=m,
        beta=beta,
        algo=algo,
        rounds=_num(flat, "rounds", int, 0),
        epochs=_num(flat, "epochs", int, 0),
        batch_size=_num(flat, "batch_size", int, 2),
        participation=mu,
        dp=dp,
        nu=_num(flat, "nu", float, 0, 1 - 1e-12),
        temperature=_num(flat, "temperature", float, 0, lo_open=True),
        optim=optim,
        repr_dim=_num(flat, "model.repr_dim", int, 1),
        hidden=_num(flat, "model.hidden", int, 1),
        seeds=list(seeds),
        out=str(flat["out"]),
        workers=_num(flat, "workers", int, 1),
        timing=bool(flat["timing"]),
        checkpoint=bool(flat["checkpoint"]),
        dump_hk_rounds=list(rounds_hk),
    )


# ------------------------------------------------------------------ metrics

METRIC_FIELDS = ("round", "algo", "seed", "local_acc", "global_acc", "loss", "wall_ms")


@dataclass
class RoundMetrics:
    round: int
    algo: str
    seed: int
    local_acc: float
    global_acc: float
    loss: float
    wall_ms: float = 0.0
    lr: float = 0.0

    def __post_init__(self):
        for name in ("local_acc", "global_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} outside [0, 1]")


def write_metrics(metrics, out_dir) -> tuple[Path, Path]:
    """Write ``metrics.csv`` and ``metrics.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in metrics:
        w.writerow([r.round, r.algo, r.seed, repr(r.local_acc), repr(r.global_acc),
                    repr(r.loss), repr(r.wall_ms)])
    csv_path, json_path = out / "metrics.csv", out / "metrics.json"
    csv_path.write_text(buf.getvalue())
    json_path.write_text(json.dumps([asdict(r) for r in metrics], indent=1) + "\n")
    return csv_path, json_path


def read_metrics_csv(path) -> list[RoundMetrics]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RoundMetrics(int(r["round"]), r["algo"], int(r["seed"]), float(r["local_acc"]),
                         float(r["global_acc"]), float(r["loss"]), float(r["wall_ms"]))
            for r in rows]


# ------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"FHKD"
CHECKPOINT_VERSION = 1
_KIND_TAGS = {"dense": 0, "relu": 1, "batchnorm": 2}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}
_TENSORS = {"dense": ("weight", "bias"), "relu": (),
            "batchnorm": ("scale", "shift", "running_mean", "running_var")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: SplitModel, path) -> None:
    """Little-endian binary dump; see README for the byte layout."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, len(model.layers),
                                           len(model.extractor))]
    for layer in model.layers:
        parts.append(struct.pack("<BIdd", _KIND_TAGS[layer.kind], layer.dim, layer.momentum,
                                 layer.eps))
        for name in _TENSORS[layer.kind]:
            arr = np.ascontiguousarray(layer.params[name], dtype="<f8")
            parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, strict: bool = True) -> SplitModel:
    raw = Path(path).read_bytes()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4
    version, n_layers, n_extractor = take("<III")
    if version > CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} "
                              f"(this build reads <= {CHECKPOINT_VERSION})")
    if version < 1 or n_extractor > n_layers:
        raise CheckpointError(f"{path}: corrupt header")
    layers = []
    for _ in range(n_layers):
        tag, dim, momentum, eps = take("<BIdd")
        if tag not in _TAG_KINDS:
            raise CheckpointError(f"{path}: unknown layer tag {tag}")
        kind = _TAG_KINDS[tag]
        params = {}
        for name in _TENSORS[kind]:
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I")
            count = int(np.prod(shape))
            nbytes = 8 * count
            if pos + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {kind}.{name}")
            params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos) \
                .reshape(shape).astype(np.float64)
            pos += nbytes
        layers.append(Layer(kind, params, dim, momentum, eps))
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return SplitModel(layers[:n_extractor], layers[n_extractor:], strict)


# ------------------------------------------------------------------ runner

@dataclass
class SeedData:
    clients_train: list
    clients_test: list
    global_test: Dataset


def _subseed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def build_data(config: ExperimentConfig, seed: int) -> SeedData:
    ds = config.dataset
    if ds["kind"] == "blobs":
        n = ds["n_classes"]
        full = gen_blobs(n, ds["dim"], ds["samples"] // n, ds["spread"], _subseed(seed, 1),
                         ds["separation"])
        global_test = gen_blobs(n, ds["dim"], ds["test_per_class"], ds["spread"],
                                _subseed(seed, 2), ds["separation"])
    else:
        full = load_idx(ds["train_images"], ds["train_labels"])
        global_test = load_idx(ds["test_images"], ds["test_labels"], full.n_classes)
    parts = partition_dirichlet(full, PartitionSpec(config.n_clients, config.beta, True,
                                                    _subseed(seed, 3)))
    splits = [split_local(p, _subseed(seed, 4, i)) for i, p in enumerate(parts)]
    return SeedData([s[0] for s in splits], [s[1] for s in splits], global_test)


def _mean_ce(model: SplitModel, datasets) -> float:
    losses = [cross_entropy(softmax(forward(model, d.inputs, "eval")), d.labels)[0] * len(d)
              for d in datasets if len(d)]
    return float(sum(losses) / sum(len(d) for d in datasets))


def _round_metrics(state, data, config, seed, wall_ms, loss) -> RoundMetrics:
    local = [evaluate(state.client_model(i), test) for i, test in enumerate(data.clients_test)
             if len(test)]
    return RoundMetrics(state.round, config.algo.kind, seed, float(np.mean(local)),
                        evaluate(state.global_model, data.global_test), loss,
                        round(wall_ms, 3) if config.timing else 0.0,
                        config.optim.lr_at(state.round) if state.round else 0.0)


def run_seed(config: ExperimentConfig, seed: int,
             on_round=None) -> tuple[list[RoundMetrics], FederationState]:
    """Run one seed end to end. ``on_round(state)`` is called after every round."""
    data = build_data(config, seed)
    model = build_model(data.global_test.dim, data.global_test.n_classes, config.repr_dim,
                        config.hidden, np.random.default_rng(_subseed(seed, 5)))
    state = FederationState.initial(model, seed)
    rc = RoundConfig(data.clients_train, config.algo, config.epochs, config.batch_size,
                     config.participation, config.optim, config.dp, config.nu,
                     config.temperature)
    metrics = [_round_metrics(state, data, config, seed, 0.0, _mean_ce(model, data.clients_train))]
    for _ in range(config.rounds):
        t0 = time.perf_counter()
        state = run_round(state, rc)
        wall = 1000.0 * (time.perf_counter() - t0)
        metrics.append(_round_metrics(state, data, config, seed, wall, state.last_loss))
        log.debug("seed %d round %d: %s", seed, state.round, metrics[-1])
        if on_round is not None:
            on_round(state)
    return metrics, state


def _seed_job(args):
    config, seed = args
    metrics, state = run_seed(config, seed, _hk_dumper(config, seed))
    if config.checkpoint:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state.global_model, out / f"global_seed{seed}.fhkd")
    return metrics


def _hk_dumper(config, seed):
    if not config.dump_hk_rounds:
        return None
    wanted = set(config.dump_hk_rounds)

    def dump(state):
        if state.round in wanted:
            out = Path(config.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"hk_seed{seed}_round{state.round}.json").write_text(
                state.knowledge.to_json() + "\n")
    return dump


def run_experiment(config: ExperimentConfig, workers: int | None = None) -> list[RoundMetrics]:
    """Run every seed, write metrics files into ``config.out`` and return the rows.

    Seeds are dispatched to a process pool when ``workers`` > 1; rows are
    gathered and written in seed order, so output bytes do not depend on the
    pool size.
    """
    workers = config.workers if workers is None else workers
    jobs = [(config, s) for s in config.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_seed_job, jobs))
    else:
        per_seed = [_seed_job(j) for j in jobs]
    metrics = [row for rows in per_seed for row in rows]
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(metrics, out)
    (out / "config.json").write_text(json.dumps(config.to_flat(), indent=1, sort_keys=True) + "\n")
    return metrics
