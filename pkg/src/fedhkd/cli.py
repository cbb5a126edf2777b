"""Command line entry point: ``fedhkd {run,sweep,verify,dump-hk}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import ConfigError, parse_config, run_experiment, run_seed


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict:
    ov = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected KEY=VALUE")
        ov[key] = _parse_value(value)
    if getattr(args, "seed", None) is not None:
        ov["seeds"] = args.seed
    if getattr(args, "algo", None):
        ov["algo.kind"] = args.algo
    if getattr(args, "out", None):
        ov["out"] = args.out
    if getattr(args, "rounds", None) is not None:
        ov["rounds"] = args.rounds
    if getattr(args, "workers", None) is not None:
        ov["workers"] = args.workers
    return ov


def _summary(metrics) -> str:
    last = max(r.round for r in metrics)
    rows = [r for r in metrics if r.round == last]
    loc = np.mean([r.local_acc for r in rows])
    glob = np.mean([r.global_acc for r in rows])
    return f"{rows[0].algo}: round {last}, {len(rows)} seed(s): local {loc:.4f} global {glob:.4f}"


def cmd_run(args) -> int:
    config = parse_config(args.config, _overrides(args))
    metrics = run_experiment(config)
    print(_summary(metrics))
    print(f"wrote {Path(config.out) / 'metrics.csv'}")
    return 0


def cmd_sweep(args) -> int:
    base = _overrides(args)
    root = Path(base.pop("out", None) or "runs/sweep")
    betas = [float(b) for b in args.beta_list.split(",")]
    algos = [a.strip() for a in args.algo_list.split(",")]
    lines = ["beta,algo,round,local_acc,global_acc"]
    for beta in betas:
        for algo in algos:
            ov = dict(base, beta=beta, **{"algo.kind": algo, "out": str(root / f"beta{beta}_{algo}")})
            metrics = run_experiment(parse_config(args.config, ov))
            last = max(r.round for r in metrics)
            rows = [r for r in metrics if r.round == last]
            lines.append(f"{beta!r},{algo},{last},{np.mean([r.local_acc for r in rows])!r},"
                         f"{np.mean([r.global_acc for r in rows])!r}")
            print(f"beta={beta} {_summary(metrics)}")
    root.mkdir(parents=True, exist_ok=True)
    (root / "summary.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {root / 'summary.csv'}")
    return 0


def cmd_verify(args) -> int:
    from .checks import run_all
    return 0 if run_all() else 1


def cmd_dump_hk(args) -> int:
    ov = _overrides(args)
    ov["rounds"] = args.round
    config = parse_config(args.config, ov)
    _, state = run_seed(config, config.seeds[0])
    text = state.knowledge.to_json()
    if args.output:
        Path(args.output).write_text(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedhkd", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat JSON config file (dotted keys)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key; VALUE is parsed as JSON when possible")
        sp.add_argument("--seed", type=int, action="append", help="seed(s) to run")
        sp.add_argument("--rounds", type=int)
        sp.add_argument("--workers", type=int)

    run = sub.add_parser("run", help="run one experiment")
    common(run)
    run.add_argument("--algo")
    run.add_argument("--out")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="grid over beta and algorithm")
    common(sweep)
    sweep.add_argument("--beta-list", default="0.2,0.5,5")
    sweep.add_argument("--algo-list", default="fedavg,fedprox,fedproto,fedhkd,fedhkd_star")
    sweep.add_argument("--out")
    sweep.set_defaults(func=cmd_sweep)

    verify = sub.add_parser("verify", help="run the oracle/property self-checks")
    verify.set_defaults(func=cmd_verify)

    dump = sub.add_parser("dump-hk", help="print global hyper-knowledge JSON after a round")
    common(dump)
    dump.add_argument("--round", type=int, required=True)
    dump.add_argument("--algo")
    dump.add_argument("--output", help="write JSON here instead of stdout")
    dump.set_defaults(func=cmd_dump_hk)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
