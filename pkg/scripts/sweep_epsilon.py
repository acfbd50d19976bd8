#!/usr/bin/env python3
"""Map where the min-max controller stops being well posed.

Sweeps the adversary temperature, training one controller per value.

For each temperature the script trains a fresh controller (or reuses a cached
checkpoint under <out>/eps_<value>/), evaluates it on the shared test set, and
appends one row to <out>/sweep.csv. A risk-neutral baseline is trained under
the same budget for reference. Small temperatures price the adversary below
the noise floor and the training diverges or misses the task; large ones
recover the risk-neutral controller.

Example:
    python scripts/sweep_epsilon.py --out runs/sweep
    python scripts/sweep_epsilon.py --epsilons 0.0005 0.005 0.05 0.5 5 \
        --set train.iterations=800 --set train.batch_size=64
"""

import argparse
import sys

from minmax_fbsde import config as config_mod
from minmax_fbsde import evaluation


def format_row(row: dict) -> str:
    eps = "baseline" if row["epsilon"] is None else f"{row['epsilon']:g}"
    rate = row["success_rate"]
    var = row["total_state_variance"]
    rate_s = "-" if rate is None else f"{rate:.3f}"
    var_s = "-" if var is None else f"{var:.5g}"
    return f"{eps:>10s} {row['status']:>8s} {rate_s:>8s} {var_s:>12s}"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None, help="YAML experiment config")
    parser.add_argument("--set", action="append", default=[], dest="overrides",
                        metavar="KEY=VALUE", help="override a config entry")
    parser.add_argument("--out", default="runs/sweep", help="output directory")
    parser.add_argument("--epsilons", type=float, nargs="+", default=None,
                        help="temperatures to sweep (default: config grid)")
    parser.add_argument("--seed", type=int, default=None, help="training seed")
    args = parser.parse_args()

    cfg = config_mod.parse_config(args.config, args.overrides)
    cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    epsilons = args.epsilons if args.epsilons is not None else cfg.sweep.epsilons
    if not epsilons:
        parser.error("no sweep temperatures: pass --epsilons or set sweep.epsilons")

    print(f"sweeping {len(epsilons)} temperatures on system={cfg.system} "
          f"(success threshold {cfg.sweep.success_threshold})")
    rows = evaluation.epsilon_sweep(cfg, epsilons, cfg.out)

    print()
    print(f"{'epsilon':>10s} {'status':>8s} {'success':>8s} {'variance':>12s}")
    for row in rows:
        print(format_row(row))
    print(f"written: {cfg.out}/sweep.csv")

    failed = [r for r in rows if r["mode"] == "minmax" and r["status"] == "failed"]
    ok = [r for r in rows if r["mode"] == "minmax" and r["status"] == "ok"]
    if failed and ok:
        print(f"well-posedness boundary: {len(failed)} failing and "
              f"{len(ok)} passing temperatures in this grid")
    return 0


if __name__ == "__main__":
    sys.exit(main())
