#!/usr/bin/env python3
"""Costly resource allocation: best-in-class values and the learned group-lasso policy.

    python3 scripts/resource_allocation.py --n 10000 --sims 10
"""
import argparse

import numpy as np

from drpolicy.bench import DgpConfig, FORMS, best_in_class, run_regret_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10000)
    ap.add_argument("--sims", type=int, default=10)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--regime", default="low", choices=("low", "high"))
    args = ap.parse_args()

    for form in FORMS:
        cfg = DgpConfig("resource-allocation", form, args.regime, args.n)
        pi, value = best_in_class(cfg, "multitask")
        res = run_regret_experiment(cfg, "multitask", ["dr", "oracle"], sims=args.sims, seed=args.seed)
        dr = res.cells[(form, args.regime, "erm-multitask", "dr", args.n)]
        oracle = res.cells[(form, args.regime, "erm-multitask", "oracle", args.n)]
        with np.printoptions(precision=3, suppress=True):
            print(f"[{form}] best-in-class value {value:.3f}, A* =\n{pi.params}")
        print(f"  learned value: dr {dr.mean:.3f} (sd {dr.std:.3f}), "
              f"oracle nuisances {oracle.mean:.3f} (sd {oracle.std:.3f})")


if __name__ == "__main__":
    main()
