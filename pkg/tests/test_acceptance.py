"""End-to-end acceptance criteria 1-11.

Each test appends one ``CRITERION N: PASS|FAIL ...`` line that the terminal
summary prints in order. Tolerances are the stated ones; nothing is tuned.
Runtime is roughly ten minutes on one core.
"""
import math
import os
import subprocess
import sys
import warnings

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import ACCEPTANCE_LINES
from drpolicy.bench import (FORMS, ORACLE_SEED, BenchSettings, DgpConfig, best_in_class,
                            evaluation_policies, generate_pricing_data, run_evaluation_experiment,
                            run_regret_experiment, true_policy_value)
from drpolicy.core import NuisancePair, identity_action_map, one_hot_map, pricing_linear_map, \
    pricing_quadratic_map
from drpolicy.estimators import (make_dr_records, policy_value, revenue_objective, theta_dr,
                                 theta_dr_iv, theta_dr_multiaction, theta_dr_pricing_linear,
                                 theta_dr_pricing_quadratic, value_direct)
from drpolicy.nuisance import ConvergenceWarning, lambda_max, lasso_fit, raw_moments_from_central
from drpolicy.policy_opt import group_lambda_max, multitask_lasso_fit

pytestmark = pytest.mark.acceptance

SEED = 42
POLICIES = ("constant", "linear", "threshold", "sin")
OBJ = revenue_objective("linear-demand")


def report(number, ok, detail):
    ACCEPTANCE_LINES.append(f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def evaluation():
    return {f: run_evaluation_experiment(DgpConfig(form=f, n=10000), sims=100, seed=SEED)
            for f in FORMS}


def cell(res, form, policy, est, n=10000):
    return res.cells[(form, "low", policy, est, n)]


# 1-3: evaluation study

def test_criterion_1_evaluation_fidelity(evaluation):
    bad, worst = [], 0.0
    for f in FORMS:
        for p in POLICIES:
            c = cell(evaluation[f], f, p, "dr")
            err = abs(c.mean - c.true_value)
            tol = max(3 * c.std / math.sqrt(c.sims), 0.02 * abs(c.true_value))
            worst = max(worst, err / tol)
            if err > tol:
                bad.append(f"{f}/{p}")
    report(1, not bad, f"16 cells, worst |err|/tol={worst:.3f}; failing={bad}")


def test_criterion_2_efficiency(evaluation):
    ratios = {}
    for f in FORMS:
        for p in POLICIES:
            ratios[f"{f}/{p}"] = cell(evaluation[f], f, p, "dr").std / cell(evaluation[f], f, p, "oracle").std
    bad = {k: round(v, 3) for k, v in ratios.items() if not 0.8 <= v <= 1.5}
    report(2, not bad, f"std ratio range [{min(ratios.values()):.3f}, {max(ratios.values()):.3f}]; "
                       f"outside [0.8, 1.5]={bad}")


def test_criterion_3_baseline_separation(evaluation):
    summary, ok = [], True
    for f in ("step", "sigmoid"):
        hits = 0
        for p in POLICIES:
            bias = {e: abs(cell(evaluation[f], f, p, e).mean - cell(evaluation[f], f, p, e).true_value)
                    for e in ("dr", "direct", "ips")}
            hits += bias["direct"] > 3 * bias["dr"] and bias["ips"] > 3 * bias["dr"]
        ok &= hits >= len(POLICIES) / 2
        summary.append(f"{f}: {hits}/4 cells")
    report(3, ok, "; ".join(summary))


# 4-5: regret

def test_criterion_4_regret_ordering():
    lines, ok = [], True
    for f in ("step", "sigmoid"):
        res = run_regret_experiment(DgpConfig(form=f, n=5000), ["constant", "linear"],
                                    ["dr", "direct", "ips", "oracle"], sims=100, seed=SEED)
        for fam in ("constant", "linear"):
            r = {e: cell(res, f, f"erm-{fam}", e, 5000).mean_regret
                 for e in ("dr", "direct", "ips", "oracle")}
            good = r["dr"] < r["direct"] and r["dr"] < r["ips"] and r["dr"] <= 2 * r["oracle"]
            ok &= good
            lines.append(f"{f}/{fam} dr={r['dr']:.4f} direct={r['direct']:.4f} "
                         f"ips={r['ips']:.4f} oracle={r['oracle']:.4f}{'' if good else ' <-'}")
    report(4, ok, "; ".join(lines))


def test_criterion_5_regret_monotonicity():
    lines, ok = [], True
    for f in FORMS:
        regrets = {}
        for n in (1000, 10000):
            res = run_regret_experiment(DgpConfig(form=f, n=n), ["constant", "linear"], ["dr"],
                                        sims=100, seed=SEED)
            for fam in ("constant", "linear"):
                regrets[(fam, n)] = cell(res, f, f"erm-{fam}", "dr", n).mean_regret
        for fam in ("constant", "linear"):
            good = regrets[(fam, 10000)] < regrets[(fam, 1000)]
            ok &= good
            lines.append(f"{f}/{fam} {regrets[(fam, 1000)]:.4f}->{regrets[(fam, 10000)]:.4f}"
                         f"{'' if good else ' <-'}")
    report(5, ok, "; ".join(lines))


# 6-7: robustness and orthogonality

def dr_bias(data, truth, theta_fn, sigma_fn, pi, v_true):
    recs = make_dr_records(data, pricing_linear_map(), NuisancePair(theta_fn, sigma_fn))
    v = policy_value(recs, pi, OBJ)
    return v.point - v_true, v.se


def test_criterion_6_double_robustness():
    cfg = DgpConfig(form="quadratic", n=10 ** 5, seed=ORACLE_SEED)
    data, truth = generate_pricing_data(cfg)
    pi = evaluation_policies(cfg)["sin"]
    v_true = true_policy_value(cfg, pi)
    theta_off = lambda z: truth.theta(z) + 1.0
    pert = np.array([[0.5, 0.2], [0.2, 0.5]])
    sigma_off = lambda z: truth.sigma(z) + pert
    cases = {
        "theta-wrong": dr_bias(data, truth, theta_off, truth.sigma, pi, v_true),
        "sigma-wrong": dr_bias(data, truth, truth.theta, sigma_off, pi, v_true),
        "both-wrong": dr_bias(data, truth, theta_off, sigma_off, pi, v_true),
    }
    z = {k: abs(b) / se for k, (b, se) in cases.items()}
    ok = z["theta-wrong"] <= 3 and z["sigma-wrong"] <= 3 and z["both-wrong"] > 3
    report(6, ok, ", ".join(f"{k} |bias|/SE={v:.2f}" for k, v in z.items()))


def loglog_slope(ts, errs):
    return float(np.polyfit(np.log(ts), np.log(errs), 1)[0])


def test_criterion_7_orthogonality():
    cfg = DgpConfig(form="quadratic", n=10 ** 6, seed=ORACLE_SEED)
    data, truth = generate_pricing_data(cfg)
    pi = evaluation_policies(cfg)["sin"]
    rng = np.random.default_rng(ORACLE_SEED)
    d_theta = rng.normal(size=2)
    d_theta /= np.linalg.norm(d_theta)
    B = rng.normal(size=(2, 2))
    d_sigma = B @ B.T / np.linalg.norm(B @ B.T)
    fmap = pricing_linear_map()

    def v_dr(t):
        nuis = NuisancePair(lambda z: truth.theta(z) + t * d_theta,
                            lambda z: truth.sigma(z) + t * d_sigma)
        return policy_value(make_dr_records(data, fmap, nuis), pi, OBJ).point

    def v_direct(t):
        return value_direct(data, fmap, lambda z: truth.theta(z) + t * d_theta, pi, OBJ).point

    def population(t):
        # E over zbar of pi (1, pi) t (I - Sigma_t^{-1} Sigma_0) d_theta, no sampling noise
        def f(m):
            s0 = np.array([[1.0, m], [m, 1.0 + m * m]])
            p = math.sin(m)
            return p * np.array([1.0, p]) @ (t * (d_theta - np.linalg.solve(s0 + t * d_sigma, s0 @ d_theta)))
        return abs(quad(f, 1.0, 2.0)[0])

    ts = [0.02, 0.04, 0.08, 0.16]
    base, base_direct = v_dr(0.0), v_direct(0.0)
    errs = [abs(v_dr(t) - base) for t in ts]
    slope = loglog_slope(ts, errs)
    direct = loglog_slope(ts, [abs(v_direct(t) - base_direct) for t in ts])
    pop = loglog_slope(ts, [population(t) for t in ts])
    report(7, slope >= 1.9, f"DR slope={slope:.3f} (errors {', '.join(f'{e:.2e}' for e in errs)}); "
                            f"noise-free slope={pop:.3f}; direct-method slope={direct:.3f}")


# 8: algebraic reductions

def const_nuis(theta, sigma):
    return NuisancePair(lambda z: np.asarray(theta, dtype=float)[None, :],
                        lambda z: np.asarray(sigma, dtype=float)[None, :, :])


def test_criterion_8_algebraic_reductions():
    rng = np.random.default_rng(ORACLE_SEED)
    worst = {"linear": 0.0, "quadratic": 0.0, "multiaction": 0.0, "iv": 0.0}
    for _ in range(1000):
        a_hat, b_hat = rng.uniform(-3, 3, 2)
        g, s2 = rng.uniform(-2, 2), rng.uniform(0.3, 3.0)
        p, d = rng.normal(g, 1.0), rng.normal(0.0, 3.0)
        a_cf, b_cf = theta_dr_pricing_linear(d, p, a_hat, b_hat, g, s2)
        S = np.array([[1.0, g], [g, s2 + g * g]])
        gen = theta_dr(d, [p], [0.0], pricing_linear_map(), const_nuis([a_hat, -b_hat], S))
        worst["linear"] = max(worst["linear"], abs(gen[0] - a_cf), abs(-gen[1] - b_cf))
        iv = theta_dr_iv(d, [p], [0.0], [1.0, p], pricing_linear_map(), [a_hat, -b_hat], S)
        worst["iv"] = max(worst["iv"], np.max(np.abs(iv - gen)))

        mu1, muc2 = rng.uniform(-1.5, 1.5), rng.uniform(0.5, 2.0)
        muc3 = muc2 ** 1.5 * rng.uniform(-0.5, 0.5)
        muc4 = muc3 ** 2 / muc2 + muc2 ** 2 * rng.uniform(2.0, 5.0)
        pq, r = rng.normal(mu1, math.sqrt(muc2)), rng.normal(0.0, 3.0)
        a_cf, b_cf = theta_dr_pricing_quadratic(r, pq, a_hat, b_hat, mu1, muc2, muc3, muc4)
        mu2, mu3, mu4 = raw_moments_from_central(mu1, muc2, muc3, muc4)
        gen = theta_dr(r, [pq], [0.0], pricing_quadratic_map(),
                       const_nuis([a_hat, -b_hat], [[mu2, mu3], [mu3, mu4]]))
        worst["quadratic"] = max(worst["quadratic"], abs(gen[0] - a_cf), abs(-gen[1] - b_cf))

        th = rng.normal(size=4)
        prop = rng.dirichlet(np.ones(4)) * 0.96 + 0.01
        i = int(rng.integers(1, 5))
        y = rng.normal(0.0, 3.0)
        gen = theta_dr(y, [i], [0.0], one_hot_map(4), const_nuis(th, np.diag(prop)))
        worst["multiaction"] = max(worst["multiaction"],
                                   np.max(np.abs(gen - theta_dr_multiaction(y, i, th, prop))))
    ok = (worst["linear"] <= 1e-10 and worst["quadratic"] <= 1e-10
          and worst["multiaction"] <= 1e-10 and worst["iv"] <= 1e-12)
    report(8, ok, ", ".join(f"{k} max|diff|={v:.1e}" for k, v in worst.items()))


# 9: resource allocation

def test_criterion_9_resource_allocation():
    best = {f: best_in_class(DgpConfig("resource-allocation", f), "multitask")[1] for f in FORMS}
    near = [f for f, v in best.items() if abs(v - 22.2) <= 0.05 * 22.2]
    ratios, ok_learn = {}, True
    for f in FORMS:
        cfg = DgpConfig("resource-allocation", f, n=10000)
        res = run_regret_experiment(cfg, "multitask", ["dr", "oracle"], sims=100, seed=SEED)
        dr = cell(res, f, "erm-multitask", "dr").mean
        oracle = cell(res, f, "erm-multitask", "oracle").mean
        ratios[f] = dr / oracle
        ok_learn &= abs(dr - oracle) <= 0.05 * abs(oracle)
    report(9, bool(near) and ok_learn,
           "best-in-class " + ", ".join(f"{f}={v:.2f}" for f, v in best.items())
           + f" (target 22.2 +-5%: {near or 'none'}); dr/oracle value "
           + ", ".join(f"{f}={r:.4f}" for f, r in ratios.items()))


# 10: solvers

def kkt(fit, X, y):
    Xs = (X[:, fit.keep] - fit.mean) / fit.scale
    g = Xs.T @ (y - fit.predict(X)) / X.shape[0]
    b = fit.std_coef
    zero = b == 0
    return max(np.max(np.abs(g[zero]) - fit.lam, initial=0.0),
               np.max(np.abs(g[~zero] - fit.lam * np.sign(b[~zero])), initial=0.0))


def group_kkt(T, Z, A, s):
    W = A.T
    g = -2.0 * Z.T @ (T - Z @ W)
    out = 0.0
    for j in range(W.shape[0]):
        nrm = np.linalg.norm(W[j])
        out = max(out, np.max(np.abs(g[j] + s * W[j] / nrm)) if nrm > 0 else np.linalg.norm(g[j]) - s)
    return out


def test_criterion_10_solvers():
    rng = np.random.default_rng(ORACLE_SEED)
    worst_kkt, unconverged = 0.0, 0
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        for _ in range(100):
            n, p = int(rng.integers(30, 200)), int(rng.integers(2, 40))
            X = rng.normal(size=(n, p)) @ (np.eye(p) + 0.5 * rng.normal(size=(p, p)) / math.sqrt(p))
            beta = rng.normal(size=p) * (rng.random(p) < 0.3)
            y = X @ beta + rng.normal(size=n)
            lam = lambda_max(X, y) * rng.uniform(0.01, 1.0)
            try:
                fit = lasso_fit(X, y, lam)
            except ConvergenceWarning:
                unconverged += 1
                continue
            worst_kkt = max(worst_kkt, kkt(fit, X, y))
        X = rng.normal(size=(300, 8))
        y = X @ rng.normal(size=8) + 2.0 + rng.normal(size=300)
        fit = lasso_fit(X, y, 0.0)
    ls = np.linalg.lstsq(np.column_stack([np.ones(300), X]), y, rcond=None)[0]
    ls_err = max(abs(fit.intercept - ls[0]), np.max(np.abs(fit.coef - ls[1:])))
    worst_group = 0.0
    for _ in range(20):
        Z = rng.normal(size=(150, 5))
        T = Z @ rng.normal(size=(5, 2)) + rng.normal(size=(150, 2))
        s = group_lambda_max(T, Z) * rng.uniform(0.01, 0.9)
        fit_mt = multitask_lasso_fit(T, Z, s)
        worst_group = max(worst_group, group_kkt(T, Z, fit_mt.A, s))
    ok = unconverged == 0 and worst_kkt <= 1e-6 and ls_err <= 1e-8 and worst_group <= 1e-6
    report(10, ok, f"lasso KKT max={worst_kkt:.1e} over 100 problems (unconverged {unconverged}); "
                   f"lambda=0 vs lstsq {ls_err:.1e}; group KKT max={worst_group:.1e}")


# 11: determinism

def cli_output(tmp_path, name, workers):
    out = tmp_path / f"{name}.csv"
    env = dict(os.environ, DRPOLICY_WORKERS=str(workers))
    proc = subprocess.run([sys.executable, "-m", "drpolicy", "bench-pricing", "--form", "step,sigmoid",
                           "--n", "500", "--sims", "4", "--seed", str(SEED), "--emit-raw",
                           "--out", str(out)], env=env, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return out.read_bytes() + b"\x00" + (tmp_path / f"{name}.csv.raw.csv").read_bytes()


def test_criterion_11_determinism(tmp_path):
    a = cli_output(tmp_path, "a", 1)
    b = cli_output(tmp_path, "b", 1)
    c = cli_output(tmp_path, "c", 3)
    report(11, a == b and a == c, f"two runs identical={a == b}, 1 vs 3 workers identical={a == c} "
                                  f"({len(a)} bytes)")
