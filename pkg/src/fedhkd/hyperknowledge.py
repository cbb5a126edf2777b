"""Per-class hyper-knowledge: extraction, Gaussian-mechanism privatization, server aggregation.

A client's hyper-knowledge for class ``j`` is the pair (mean clipped
representation, mean soft prediction) over its class-``j`` training
samples, plus the sample count that weights it on the server.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .model import SplitModel, classify, clip_representation, extract, soft_target


@dataclass(frozen=True)
class ClassHyperKnowledge:
    cls: int
    mean_repr: np.ndarray
    mean_soft: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("hyper-knowledge needs at least one sample")


@dataclass
class GlobalHyperKnowledge:
    """Server-side table ``class -> (H, Q)``; missing classes had no sharer."""

    n_classes: int
    repr_dim: int
    round: int = 0
    entries: dict = field(default_factory=dict)

    def present(self) -> list[int]:
        return sorted(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, j) -> bool:
        return j in self.entries

    def reps(self) -> np.ndarray:
        """``H`` for present classes, stacked in :meth:`present` order."""
        return np.array([self.entries[j][0] for j in self.present()]).reshape(-1, self.repr_dim)

    def softs(self) -> np.ndarray:
        return np.array([self.entries[j][1] for j in self.present()]).reshape(-1, self.n_classes)

    def to_dict(self) -> dict:
        classes = []
        for j in range(self.n_classes):
            if j in self.entries:
                h, q = self.entries[j]
                classes.append({"j": j, "H": h.tolist(), "Q": q.tolist(), "present": True})
            else:
                classes.append({"j": j, "H": [], "Q": [], "present": False})
        return {"round": self.round, "classes": classes}

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, doc: dict, repr_dim: int | None = None) -> "GlobalHyperKnowledge":
        entries = {}
        for c in doc["classes"]:
            if c["present"]:
                entries[int(c["j"])] = (np.asarray(c["H"], dtype=np.float64),
                                        np.asarray(c["Q"], dtype=np.float64))
        if repr_dim is None:
            repr_dim = len(next(iter(entries.values()))[0]) if entries else 0
        return cls(len(doc["classes"]), repr_dim, int(doc["round"]), entries)


@dataclass(frozen=True)
class DpConfig:
    zeta: float = 3.0
    sigma: float = 7.0
    epsilon: float = 0.5
    delta: float = 0.01
    enabled: bool = True

    def __post_init__(self):
        if not self.zeta > 0:
            raise ValueError("zeta must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.enabled and self.sigma == 0:
            raise ValueError("sigma = 0 requires DP to be disabled explicitly (enabled=False)")
        if not self.epsilon > 0 or not 0 < self.delta < 1:
            raise ValueError("need epsilon > 0 and 0 < delta < 1")


def sensitivity(zeta: float, count: int) -> float:
    """Largest change of a class mean when one of ``count`` samples bounded by ``zeta`` is removed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not zeta > 0:
        raise ValueError("zeta must be > 0")
    return 2.0 * zeta / count


def min_sigma(epsilon: float, delta: float) -> float:
    """Smallest noise multiplier for (epsilon, delta)-DP under the Gaussian mechanism."""
    if not epsilon > 0 or not 0 < delta < 1:
        raise ValueError("need epsilon > 0 and 0 < delta < 1")
    return math.sqrt(2.0 * math.log(5.0 / (4.0 * delta))) / epsilon


def noise_std(count: int, dp: DpConfig) -> float:
    return sensitivity(dp.zeta, count) * dp.sigma if dp.enabled else 0.0


def compute_local_hk(model: SplitModel, train, nu: float = 0.25, temperature: float = 0.5,
                     zeta: float = 3.0) -> dict[int, ClassHyperKnowledge]:
    """Class means of clipped representations and of soft predictions.

    Classes holding less than a ``nu`` fraction of ``train`` are withheld.
    Soft predictions come from the model's unclipped representations.
    """
    if len(train) == 0:
        raise ValueError("cannot compute hyper-knowledge of an empty dataset")
    if not 0 <= nu < 1:
        raise ValueError("nu must lie in [0, 1)")
    h = extract(model, train.inputs, "eval")
    q = soft_target(classify(model, h), temperature)
    h_sum, counts = _kernels.class_sums(clip_representation(h, zeta), train.labels, train.n_classes)
    q_sum, _ = _kernels.class_sums(q, train.labels, train.n_classes)
    total = len(train)
    out = {}
    for j in range(train.n_classes):
        c = int(counts[j])
        if c == 0 or c / total < nu:
            continue
        out[j] = ClassHyperKnowledge(j, h_sum[j] / c, q_sum[j] / c, c)
    return out


def privatize(hk: ClassHyperKnowledge, dp: DpConfig, rng: np.random.Generator) -> ClassHyperKnowledge:
    """Add N(0, (S_f * sigma)^2) noise to each element of the mean representation."""
    std = noise_std(hk.count, dp)
    if std == 0.0:
        return hk
    noisy = hk.mean_repr + rng.normal(0.0, std, size=hk.mean_repr.shape)
    return replace(hk, mean_repr=noisy)


def aggregate_hk(contributions, n_classes: int, repr_dim: int, round: int = 0) -> GlobalHyperKnowledge:
    """Count-weighted average per class over the clients that shared it.

    ``contributions`` is a sequence of ``(client_id, {class: ClassHyperKnowledge})``.
    """
    out = GlobalHyperKnowledge(n_classes, repr_dim, round)
    ordered = sorted(contributions, key=lambda c: c[0])
    for j in range(n_classes):
        shared = [hk[j] for _, hk in ordered if j in hk]
        if not shared:
            continue
        counts = np.array([s.count for s in shared], dtype=np.float64)
        w = counts / counts.sum()
        H = _kernels.weighted_sum(np.array([s.mean_repr for s in shared]), w)
        Q = _kernels.weighted_sum(np.array([s.mean_soft for s in shared]), w)
        out.entries[j] = (H, Q)
    return out


def aggregate_noise_variance(sigma: float, sensitivities) -> float:
    """Per-element variance of an equal-weight aggregate of noisy means."""
    s = np.asarray(sensitivities, dtype=np.float64)
    return sigma ** 2 / s.size ** 2 * float(np.sum(s ** 2))
