"""Acceptance criteria 1-11.

Each test records one PASS/FAIL line; ``conftest.py`` prints them in the
terminal summary. Run standalone with ``python3 tests/test_acceptance.py``.
"""

import time

import numpy as np
import pytest

from fedhkd.checks import gradient_error
from fedhkd.data import PartitionSpec, gen_blobs, partition_dirichlet
from fedhkd.federation import AlgoSpec, aggregate_models
from fedhkd.harness import parse_config, run_experiment, run_seed
from fedhkd.hyperknowledge import (
    ClassHyperKnowledge,
    DpConfig,
    aggregate_hk,
    aggregate_noise_variance,
    min_sigma,
    privatize,
    sensitivity,
)

RESULTS = []

SEEDS = [0, 1, 2, 3, 4]
ACCEPT = {"dataset.kind": "blobs", "dataset.n_classes": 10, "dataset.dim": 16,
          "dataset.samples": 800, "clients": 8, "beta": 0.5, "model.hidden": 32,
          "model.repr_dim": 8, "rounds": 30, "epochs": 5, "batch_size": 32, "seeds": SEEDS,
          "checkpoint": False}

# Measured once with this implementation on SEEDS (final round, mean over seeds).
# They pin the trajectory; the criteria themselves are checked against live runs.
REFERENCE = {
    "fedavg": (0.85, 0.8696),
    "fedhkd": (0.85, 0.8662),
    "fedhkd_star": (0.85, 0.8692),
    "fedproto": (0.884, 0.711),
}


def record(n, title, ok, detail):
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title}: {detail}")
    assert ok, detail


_RUNS = {}


def acceptance_run(algo, tmp_root):
    if algo not in _RUNS:
        cfg = parse_config(overrides=dict(ACCEPT, **{"algo.kind": algo,
                                                     "out": str(tmp_root / algo)}))
        t0 = time.perf_counter()
        rows = run_experiment(cfg)
        _RUNS[algo] = (rows, time.perf_counter() - t0)
    return _RUNS[algo]


def final_means(rows):
    last = [r for r in rows if r.round == ACCEPT["rounds"]]
    return float(np.mean([r.local_acc for r in last])), float(np.mean([r.global_acc for r in last]))


@pytest.fixture(scope="module")
def tmp_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.mark.slow
def test_c01_trend_fedhkd_over_fedavg(tmp_root):
    rows_h, t_h = acceptance_run("fedhkd", tmp_root)
    rows_a, t_a = acceptance_run("fedavg", tmp_root)
    loc_h, glob_h = final_means(rows_h)
    loc_a, glob_a = final_means(rows_a)
    gain = 100 * (glob_h - glob_a)
    local_gap = 100 * (loc_h - loc_a)
    ok = gain >= 2.0 and local_gap >= -0.5 and t_h + t_a <= 180
    record(1, "fedhkd global gain >= 2 pts, local >= fedavg - 0.5", ok,
           f"global {glob_h:.4f} vs {glob_a:.4f} ({gain:+.2f} pts), "
           f"local {loc_h:.4f} vs {loc_a:.4f} ({local_gap:+.2f} pts), {t_h + t_a:.1f}s")


@pytest.mark.slow
def test_c02_star_over_fedproto(tmp_root):
    _, glob_s = final_means(acceptance_run("fedhkd_star", tmp_root)[0])
    _, glob_p = final_means(acceptance_run("fedproto", tmp_root)[0])
    record(2, "fedhkd_star global >= fedproto", glob_s >= glob_p,
           f"{glob_s:.4f} vs {glob_p:.4f}")


@pytest.mark.slow
def test_reference_numbers_frozen(tmp_root):
    for algo, (loc, glob) in REFERENCE.items():
        got = final_means(acceptance_run(algo, tmp_root)[0])
        # one test sample of 1000 is 0.001; allow a couple for backend rounding
        np.testing.assert_allclose(got, (loc, glob), atol=0.0025, err_msg=algo)


def test_c03_privacy_arithmetic():
    s = min_sigma(0.5, 0.01)
    v = (sensitivity(3, 256) * 7) ** 2
    ok = abs(s - 6.215) <= 1e-3 and abs(v - 0.026917) <= 1e-6
    record(3, "privacy arithmetic", ok, f"min_sigma={s:.6f}, noise var={v:.8f}")


def test_c04_sensitivity_brute_force():
    rng = np.random.default_rng(404)
    zeta, violations, worst = 3.0, 0, 0.0
    for n in (2, 5, 32, 256):
        bound = sensitivity(zeta, n)
        for _ in range(1000):
            a = rng.uniform(-zeta, zeta, size=(n, 4))
            b = a.copy()
            b[rng.integers(n)] = rng.uniform(-zeta, zeta, size=4)
            gap = np.abs(a.mean(axis=0) - b.mean(axis=0)).max()
            worst = max(worst, gap / bound)
            violations += gap > bound
    record(4, "sensitivity bound brute force", violations == 0,
           f"{violations} violations, max gap/bound {worst:.4f}")


def test_c05_noise_cancellation():
    rng = np.random.default_rng(505)
    m, count, dp = 10, 50, DpConfig(zeta=3, sigma=7)
    base = [ClassHyperKnowledge(0, rng.uniform(-1, 1, 3), np.array([1.0]), count) for _ in range(m)]
    clean = aggregate_hk([(i, {0: b}) for i, b in enumerate(base)], 1, 3).entries[0][0]
    draws = 100_000
    dev = np.empty((draws, 3))
    for k in range(draws):
        dev[k] = aggregate_hk([(i, {0: privatize(b, dp, rng)}) for i, b in enumerate(base)],
                              1, 3).entries[0][0] - clean
    want = aggregate_noise_variance(dp.sigma, [sensitivity(dp.zeta, count)] * m)
    ratio = dev.var(axis=0) / want
    record(5, "aggregate noise variance within 10%", bool(np.all(np.abs(ratio - 1) < 0.1)),
           f"empirical/predicted = {np.round(ratio, 4).tolist()}")


def test_c06_gradient_suite():
    rng = np.random.default_rng(606)
    algos = [AlgoSpec("fedavg"), AlgoSpec("fedprox", mu_prox=0.7),
             AlgoSpec("fedproto", lam_proto=0.4), AlgoSpec("fedhkd", lam=0.6, gamma=0.4),
             AlgoSpec("fedhkd_star", lam=0.6)]
    worst = max(gradient_error(algos[t % len(algos)], rng) for t in range(100))
    record(6, "objective gradients vs finite differences", worst < 1e-4,
           f"worst relative error {worst:.2e} over 100 instances")


def test_c07_reduction_equivalence(tmp_path):
    small = dict(ACCEPT, rounds=5, seeds=[0], out=str(tmp_path))
    trails = []
    for over in ({"algo.kind": "fedhkd", "algo.lam": 0.0, "algo.gamma": 0.0, "dp.enabled": False,
                  "dp.sigma": 0.0},
                 {"algo.kind": "fedavg"}):
        trail = []
        run_seed(parse_config(overrides=dict(small, **over)), 0,
                 lambda s: trail.append(b"".join(a.tobytes()
                                                 for a in s.global_model.state_arrays())))
        trails.append(trail)
    record(7, "fedhkd(lam=gamma=0, no DP) == fedavg bitwise", trails[0] == trails[1],
           f"{sum(a == b for a, b in zip(*trails))}/5 rounds identical")


def test_c08_aggregation_oracle():
    rng = np.random.default_rng(808)
    worst = 0.0
    withheld = 0
    for _ in range(200):
        k = int(rng.integers(1, 6))
        states = [[rng.normal(size=(4, 3)), rng.normal(size=5)] for _ in range(k)]
        sizes = rng.integers(1, 60, size=k)
        got = aggregate_models(states, sizes)
        for t in range(2):
            for idx in np.ndindex(got[t].shape):
                ref = sum(int(sizes[c]) * states[c][t][idx] for c in range(k)) / int(sizes.sum())
                worst = max(worst, abs(got[t][idx] - ref))
        contrib = [(i, {j: ClassHyperKnowledge(j, rng.normal(size=3), rng.dirichlet(np.ones(4)),
                                               int(rng.integers(1, 40)))
                        for j in range(4) if rng.random() < 0.4}) for i in range(k)]
        K = aggregate_hk(contrib, 4, 3)
        for j in range(4):
            share = [hk[j] for _, hk in contrib if j in hk]
            if not share:
                withheld += 1
                worst = max(worst, float(j in K))
                continue
            tot = sum(s.count for s in share)
            for e in range(3):
                ref = sum(s.count * s.mean_repr[e] for s in share) / tot
                worst = max(worst, abs(K.entries[j][0][e] - ref))
            for e in range(4):
                ref = sum(s.count * s.mean_soft[e] for s in share) / tot
                worst = max(worst, abs(K.entries[j][1][e] - ref))
    record(8, "model and knowledge aggregation vs brute force", worst <= 1e-12,
           f"max deviation {worst:.1e}, {withheld} withheld-class cases")


def test_c09_partition_statistics():
    full = gen_blobs(10, 4, 100, 1.0, seed=0)
    glob = full.class_counts() / len(full)
    dev = max(np.abs(p.class_counts() / len(p) - glob).max()
              for s in range(10) for p in partition_dirichlet(full, PartitionSpec(10, 1e6, True, s)))
    hits = 0
    for s in range(10):
        parts = partition_dirichlet(full, PartitionSpec(10, 0.2, True, s))
        hits += any(np.sort(p.class_counts())[-2:].sum() >= 0.8 * len(p) for p in parts)
    record(9, "dirichlet partition statistics", dev <= 0.03 and hits >= 8,
           f"beta=1e6 max deviation {100 * dev:.2f} pts; beta=0.2 concentrated in {hits}/10 seeds")


@pytest.mark.slow
def test_c10_determinism_across_pools(tmp_path):
    cfg = dict(ACCEPT, **{"algo.kind": "fedhkd"})
    t0 = time.perf_counter()
    run_experiment(parse_config(overrides=dict(cfg, out=str(tmp_path / "w1"))), workers=1)
    run_experiment(parse_config(overrides=dict(cfg, out=str(tmp_path / "w3"))), workers=3)
    a = (tmp_path / "w1" / "metrics.csv").read_bytes()
    b = (tmp_path / "w3" / "metrics.csv").read_bytes()
    record(10, "metrics.csv identical for 1 vs 3 workers", a == b,
           f"{len(a)} bytes, {'identical' if a == b else 'DIFFERENT'}, "
           f"{time.perf_counter() - t0:.1f}s")


@pytest.mark.slow
def test_c11_loss_decrease(tmp_root):
    rows, _ = acceptance_run("fedhkd", tmp_root)
    curves = np.array([[r.loss for r in rows if r.seed == s] for s in SEEDS])
    med = np.median(curves, axis=0)[3:]
    rel = np.diff(med) / med[:-1]
    ups = rel[rel > 0]
    ok = len(ups) <= 2 and bool(np.all(ups < 0.05))
    record(11, "median training loss non-increasing rounds 3-30", ok,
           f"{len(ups)} increasing transitions (largest {100 * ups.max() if len(ups) else 0:.2f}%), "
           f"loss {med[0]:.4f} -> {med[-1]:.4f}")


if __name__ == "__main__":
    import sys
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
