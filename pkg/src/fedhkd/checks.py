"""Self-checks behind ``fedhkd verify``.

Each check compares the library against an independent brute-force or
closed-form oracle and returns ``(name, passed, detail)``. The pytest suite
covers the same ground at full size; these are sized to finish in seconds.
"""

from __future__ import annotations

import numpy as np

from .data import PartitionSpec, gen_blobs, partition_dirichlet
from .federation import AlgoSpec, aggregate_models, local_loss
from .hyperknowledge import (
    ClassHyperKnowledge,
    DpConfig,
    GlobalHyperKnowledge,
    aggregate_hk,
    aggregate_noise_variance,
    min_sigma,
    privatize,
    sensitivity,
)
from .model import build_model


def check_privacy_arithmetic():
    s = min_sigma(0.5, 0.01)
    v = (sensitivity(3, 256) * 7) ** 2
    ok = abs(s - 6.215) <= 1e-3 and abs(v - 0.026917) <= 1e-6
    return "privacy arithmetic", ok, f"min_sigma={s:.5f} noise_var={v:.7f}"


def check_sensitivity_bound(trials=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in (2, 5, 32, 256):
        for _ in range(trials):
            e = rng.uniform(-3, 3, size=(n, 4))
            gap = np.abs(e.mean(axis=0) - e[:-1].mean(axis=0)).max() * n / 6.0
            worst = max(worst, gap)
    return "sensitivity bound", worst <= 1.0, f"max gap / (2 zeta / N) = {worst:.4f}"


def check_noise_cancellation(draws=100_000, seed=0):
    rng = np.random.default_rng(seed)
    m, n_j, dp = 10, 40, DpConfig(zeta=3.0, sigma=7.0)
    base = [ClassHyperKnowledge(0, rng.uniform(-1, 1, 2), np.array([0.5, 0.5]), n_j) for _ in range(m)]
    clean = np.mean([b.mean_repr for b in base], axis=0)
    noisy = np.empty((draws, 2))
    for k in range(draws):
        hk = [(i, {0: privatize(b, dp, rng)}) for i, b in enumerate(base)]
        noisy[k] = aggregate_hk(hk, 2, 2).entries[0][0]
    want = aggregate_noise_variance(dp.sigma, [sensitivity(dp.zeta, n_j)] * m)
    got = ((noisy - clean) ** 2).mean(axis=0)
    ok = bool(np.all(np.abs(got / want - 1) < 0.1))
    return "noise cancellation", ok, f"variance {got.round(6).tolist()} vs {want:.6f}"


def check_gradients(instances=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    kinds = ["fedavg", "fedprox", "fedproto", "fedhkd", "fedhkd_star"]
    for t in range(instances):
        kind = kinds[t % len(kinds)]
        algo = {"fedavg": AlgoSpec("fedavg"), "fedprox": AlgoSpec("fedprox", mu_prox=0.7),
                "fedproto": AlgoSpec("fedproto", lam_proto=0.4),
                "fedhkd": AlgoSpec("fedhkd", lam=0.6, gamma=0.4),
                "fedhkd_star": AlgoSpec("fedhkd_star", lam=0.6)}[kind]
        worst = max(worst, gradient_error(algo, rng))
    return "objective gradients", worst < 1e-4, f"worst relative error {worst:.2e}"


def gradient_error(algo, rng, n_classes=3, repr_dim=4, step=1e-5) -> float:
    """Relative error of analytic vs central-difference gradient on a random instance."""
    model = build_model(5, n_classes, repr_dim, 6, rng)
    x = rng.normal(size=(4, 5))
    y = rng.integers(0, n_classes, size=4)
    K = GlobalHyperKnowledge(n_classes, repr_dim, 1)
    for j in rng.choice(n_classes, size=2, replace=False):
        K.entries[int(j)] = (rng.normal(size=repr_dim), rng.dirichlet(np.ones(n_classes)))
    anchor = [p + rng.normal(scale=0.1, size=p.shape) for p in model.trainable_params()]
    _, grads = local_loss(algo, x, y, model, K, 0.5, anchor, update_stats=False)
    analytic, numeric = [], []
    for p, g in zip(model.trainable_params(), grads):
        for i in range(p.size):
            old = p.flat[i]
            p.flat[i] = old + step
            up, _ = local_loss(algo, x, y, model, K, 0.5, anchor, update_stats=False)
            p.flat[i] = old - step
            down, _ = local_loss(algo, x, y, model, K, 0.5, anchor, update_stats=False)
            p.flat[i] = old
            numeric.append((up - down) / (2 * step))
            analytic.append(g.flat[i])
    a, n = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))


def check_aggregation(seed=0):
    rng = np.random.default_rng(seed)
    states = [[rng.normal(size=(3, 2)), rng.normal(size=4)] for _ in range(4)]
    sizes = rng.integers(1, 50, size=4)
    got = aggregate_models(states, sizes)
    err = 0.0
    for k in range(2):
        ref = np.zeros_like(states[0][k])
        for idx in np.ndindex(ref.shape):
            ref[idx] = sum(sizes[c] * states[c][k][idx] for c in range(4)) / sizes.sum()
        err = max(err, float(np.abs(got[k] - ref).max()))
    contrib = []
    for i in range(4):
        hk = {}
        for j in range(3):
            if rng.random() < 0.6:
                hk[j] = ClassHyperKnowledge(j, rng.normal(size=2), rng.dirichlet(np.ones(3)),
                                            int(rng.integers(1, 30)))
        contrib.append((i, hk))
    K = aggregate_hk(contrib, 3, 2)
    for j in range(3):
        share = [hk[j] for _, hk in contrib if j in hk]
        if not share:
            err = max(err, float(j in K))
            continue
        tot = sum(s.count for s in share)
        H = sum(s.count * s.mean_repr for s in share) / tot
        err = max(err, float(np.abs(K.entries[j][0] - H).max()))
    return "aggregation", err <= 1e-12, f"max deviation {err:.1e}"


def check_partition(seed=0):
    full = gen_blobs(10, 4, 100, 1.0, seed)
    hits = 0
    for s in range(10):
        parts = partition_dirichlet(full, PartitionSpec(10, 0.2, True, s))
        top2 = [np.sort(p.class_counts())[-2:].sum() / len(p) for p in parts]
        hits += max(top2) >= 0.8
    return "dirichlet skew", hits >= 8, f"{hits}/10 seeds with a client >= 80% in 2 classes"


ALL_CHECKS = (check_privacy_arithmetic, check_sensitivity_bound, check_aggregation, check_gradients,
              check_partition, check_noise_cancellation)


def run_all(echo=print) -> bool:
    ok = True
    for check in ALL_CHECKS:
        name, passed, detail = check()
        ok &= passed
        echo(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return ok
