#!/usr/bin/env python3
"""Evaluation and regret study on the synthetic pricing DGPs.

Prints, per form, the mean estimate and bias of every estimator for the four
evaluation policies, then the mean regret of each learner.

    python3 scripts/pricing_study.py --forms step,sigmoid --n 5000 --sims 20
"""
import argparse

from drpolicy.bench import (DgpConfig, ESTIMATORS, FORMS, run_evaluation_experiment,
                            run_regret_experiment)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--forms", default=",".join(FORMS))
    ap.add_argument("--regime", default="low", choices=("low", "high"))
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--sims", type=int, default=20)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--quadratic-revenue", action="store_true",
                    help="use the revenue outcome instead of demand")
    args = ap.parse_args()
    app = "pricing-quadratic-revenue" if args.quadratic_revenue else "pricing-linear-demand"

    for form in args.forms.split(","):
        cfg = DgpConfig(app, form, args.regime, args.n)
        ev = run_evaluation_experiment(cfg, sims=args.sims, seed=args.seed)
        print(f"\n[{form}] n={args.n} sims={args.sims}")
        print(f"{'policy':<10} {'truth':>8} " + " ".join(f"{e:>16}" for e in ESTIMATORS))
        for policy in ("constant", "linear", "threshold", "sin"):
            cells = [ev.cells[(form, args.regime, policy, e, args.n)] for e in ESTIMATORS]
            row = " ".join(f"{c.mean:8.4f} ({c.mean - c.true_value:+.3f})" for c in cells)
            print(f"{policy:<10} {cells[0].true_value:8.4f} {row}")

        rg = run_regret_experiment(cfg, ["constant", "linear"], sims=args.sims, seed=args.seed)
        for fam in ("constant", "linear"):
            regrets = {e: rg.cells[(form, args.regime, f"erm-{fam}", e, args.n)].mean_regret
                       for e in ESTIMATORS}
            print(f"regret {fam:<8} " + "  ".join(f"{e}={r:.4f}" for e, r in regrets.items()))


if __name__ == "__main__":
    main()
