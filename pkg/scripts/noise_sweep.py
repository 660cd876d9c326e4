#!/usr/bin/env python3
"""Sweep the symmetric noise ratio for one or more methods and print a
compact accuracy table (last-10-round means)."""

import argparse
import copy
import os
import sys

from fednoise.bench import load_config, run_experiment, summary_accuracy


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/blobs.cfg")
    ap.add_argument("--epsilons", default="0.0,0.2,0.4,0.5")
    ap.add_argument("--methods", default="ce_baseline,proposed")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="results")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    eps_list = [float(x) for x in args.epsilons.split(",") if x.strip()]
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    base = load_config(args.config, args.override)
    base.seed = args.seed
    os.makedirs(args.out_dir, exist_ok=True)

    table = {}
    for method in methods:
        for eps in eps_list:
            cfg = copy.deepcopy(base)
            cfg.method = method
            cfg.noise.epsilon = eps
            cfg.output = os.path.join(args.out_dir, f"sweep_{method}_eps{eps:g}.csv")
            _, records = run_experiment(cfg)
            table[method, eps] = summary_accuracy(records)
            print(f"method={method} eps={eps:g} acc_last10={table[method, eps]:.4f}")

    header = "eps      " + "".join(f"{m:>28s}" for m in methods)
    print("\n" + header)
    for eps in eps_list:
        cells = "".join(f"{table[m, eps]:>28.4f}" for m in methods)
        print(f"{eps:<9g}{cells}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
