#!/usr/bin/env python3
"""Bias of the DR value under mis-specified nuisances, and the error-vs-perturbation slope.

    python3 scripts/robustness_check.py --n 100000
"""
import argparse

import numpy as np

from drpolicy.bench import DgpConfig, evaluation_policies, generate_pricing_data, true_policy_value
from drpolicy.core import NuisancePair, pricing_linear_map
from drpolicy.estimators import make_dr_records, policy_value, revenue_objective, value_direct

OBJ = revenue_objective("linear-demand")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--form", default="quadratic")
    ap.add_argument("--n", type=int, default=100000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    cfg = DgpConfig(form=args.form, n=args.n, seed=args.seed)
    data, truth = generate_pricing_data(cfg)
    pi = evaluation_policies(cfg)["sin"]
    v_true = true_policy_value(cfg, pi)
    fmap = pricing_linear_map()

    def dr(theta, sigma):
        return policy_value(make_dr_records(data, fmap, NuisancePair(theta, sigma)), pi, OBJ)

    theta_off = lambda z: truth.theta(z) + 1.0
    sigma_off = lambda z: truth.sigma(z) + np.array([[0.5, 0.2], [0.2, 0.5]])
    print(f"true value {v_true:.4f}")
    for name, (th, sg) in {"both right": (truth.theta, truth.sigma),
                           "theta wrong": (theta_off, truth.sigma),
                           "sigma wrong": (truth.theta, sigma_off),
                           "both wrong": (theta_off, sigma_off)}.items():
        v = dr(th, sg)
        print(f"{name:<12} bias {v.point - v_true:+.4f}  ({abs(v.point - v_true) / v.se:.2f} SE)")

    rng = np.random.default_rng(args.seed)
    d_theta = rng.normal(size=2)
    d_theta /= np.linalg.norm(d_theta)
    B = rng.normal(size=(2, 2))
    d_sigma = B @ B.T / np.linalg.norm(B @ B.T)
    ts = np.array([0.02, 0.04, 0.08, 0.16])
    base = dr(truth.theta, truth.sigma).point
    base_direct = value_direct(data, fmap, truth.theta, pi, OBJ).point
    err, err_direct = [], []
    for t in ts:
        err.append(abs(dr(lambda z: truth.theta(z) + t * d_theta,
                          lambda z: truth.sigma(z) + t * d_sigma).point - base))
        err_direct.append(abs(value_direct(data, fmap, lambda z: truth.theta(z) + t * d_theta, pi,
                                           OBJ).point - base_direct))
    print("log-log slope: DR %.3f, direct %.3f" % (np.polyfit(np.log(ts), np.log(err), 1)[0],
                                                   np.polyfit(np.log(ts), np.log(err_direct), 1)[0]))


if __name__ == "__main__":
    main()
