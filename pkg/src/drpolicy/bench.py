"""Synthetic pricing / resource-allocation benchmarks with ground-truth oracles."""
from __future__ import annotations

import csv
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .core import (LINEAR_GAMMA_BOX, PRICE_BOX, InvalidInputError, LoggedDataset, NuisancePair,
                   Policy, PolicySpace, identity_action_map, pricing_linear_map,
                   pricing_quadratic_map, pricing_space)
from .estimators import (DrRecords, Objective, direct_records, ips_records, make_dr_records,
                         policy_value, revenue_objective, theta_dr_batch)
from .nuisance import PolyFeatureConfig, PricingStats, QuadraticMoments, fit_nuisances
from .policy_opt import (LEARNERS, MuRule, SplitConfig, build_records, multitask_lasso_cv,
                         regularized_erm_from_records)

APPLICATIONS = ("pricing-linear-demand", "pricing-quadratic-revenue", "resource-allocation")
FORMS = ("quadratic", "step", "sigmoid", "linear")
REGIMES = {"low": (2, 1), "high": (10, 3)}
ESTIMATORS = ("dr", "direct", "ips", "oracle")
EVAL_POLICIES = ("constant", "linear", "threshold", "sin")
ORACLE_SEED = 20190527
ORACLE_DRAWS = 10 ** 7
WORKERS_ENV = "DRPOLICY_WORKERS"


@dataclass(frozen=True)
class DgpConfig:
    application: str = "pricing-linear-demand"
    form: str = "quadratic"
    regime: str = "low"
    n: int = 1000
    seed: int = 0
    noise: float = 1.0

    def __post_init__(self):
        if self.application not in APPLICATIONS:
            raise InvalidInputError(f"unknown application {self.application!r}")
        if self.form not in FORMS:
            raise InvalidInputError(f"unknown functional form {self.form!r}")
        if self.regime not in REGIMES:
            raise InvalidInputError(f"unknown regime {self.regime!r}")
        if self.n < 1:
            raise InvalidInputError("n must be at least 1")

    @property
    def k(self) -> int:
        return REGIMES[self.regime][0]

    @property
    def l(self) -> int:
        return REGIMES[self.regime][1]

    @property
    def truth_key(self) -> "DgpConfig":
        """The config with sample-specific fields zeroed (shared ground truth)."""
        return replace(self, n=1, seed=0)


def dgp_coefficients(form: str, z_bar):
    """Demand coefficients (a(zbar), b(zbar)); the step form uses the upper branch at 1.5."""
    z = np.asarray(z_bar, dtype=float)
    if form == "quadratic":
        return 2.0 * z ** 2, 0.6 * z
    if form == "step":
        low = z < 1.5
        return np.where(low, 5.0, 6.0), np.where(low, 0.7, 1.2)
    if form == "sigmoid":
        s = 1.0 / (1.0 + np.exp(z))
        return s + 3.0, 2.0 * s + 0.1
    if form == "linear":
        return 6.0 * z, 1.0 * z
    raise InvalidInputError(f"unknown functional form {form!r}")


def feature_map_for(application: str):
    if application == "pricing-linear-demand":
        return pricing_linear_map()
    if application == "pricing-quadratic-revenue":
        return pricing_quadratic_map()
    if application == "resource-allocation":
        return identity_action_map(2)
    raise InvalidInputError(f"unknown application {application!r}")


def objective_for(application: str, cost: float = 1.0) -> Objective:
    if application == "pricing-linear-demand":
        return revenue_objective("linear-demand")
    if application == "pricing-quadratic-revenue":
        return revenue_objective("quadratic-revenue")
    return Objective("resource", cost=cost)


@dataclass(frozen=True, eq=False)
class TrueModel:
    """Ground-truth nuisances of a synthetic DGP."""

    cfg: DgpConfig

    def summary(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z[:, : self.cfg.l].mean(axis=1)

    def coefficients(self, z):
        return dgp_coefficients(self.cfg.form, self.summary(z))

    def g0(self, z) -> np.ndarray:
        return self.summary(z)

    sigma2 = 1.0

    def theta(self, z) -> np.ndarray:
        a, b = self.coefficients(z)
        if self.cfg.application == "resource-allocation":
            return np.column_stack([a, b])
        return np.column_stack([a, -b])

    def sigma(self, z) -> np.ndarray:
        m = self.summary(z)
        out = np.empty((m.shape[0], 2, 2))
        if self.cfg.application == "pricing-linear-demand":
            out[:, 0, 0] = 1.0
            out[:, 0, 1] = out[:, 1, 0] = m
            out[:, 1, 1] = 1.0 + m ** 2
        elif self.cfg.application == "pricing-quadratic-revenue":
            # Gaussian raw moments of N(m, 1)
            out[:, 0, 0] = 1.0 + m ** 2
            out[:, 0, 1] = out[:, 1, 0] = 3.0 * m + m ** 3
            out[:, 1, 1] = 3.0 + 6.0 * m ** 2 + m ** 4
        else:
            out[:, 0, 0] = out[:, 1, 1] = 1.0 + m ** 2
            out[:, 0, 1] = out[:, 1, 0] = m ** 2
        return out

    def nuisances(self) -> NuisancePair:
        if self.cfg.application == "pricing-linear-demand":
            stats = PricingStats(self.g0, 1.0)
        elif self.cfg.application == "pricing-quadratic-revenue":
            stats = QuadraticMoments(self.g0, 1.0, 0.0, 3.0)
        else:
            stats = None
        return NuisancePair(self.theta, self.sigma, stats)


@dataclass(frozen=True, eq=False)
class SyntheticData:
    data: LoggedDataset
    truth: TrueModel

    def __iter__(self):
        return iter((self.data, self.truth))


def _contexts(cfg: DgpConfig, rng: np.random.Generator):
    z = rng.uniform(1.0, 2.0, size=(cfg.n, cfg.k))
    return z, z[:, : cfg.l].mean(axis=1)


def generate_pricing_data(cfg: DgpConfig) -> SyntheticData:
    """Demand d = a(zbar) - b(zbar) p + eps with p ~ N(zbar, 1)."""
    rng = np.random.default_rng(cfg.seed)
    z, zbar = _contexts(cfg, rng)
    price = rng.normal(zbar, 1.0)
    eps = rng.normal(0.0, cfg.noise, cfg.n)
    a, b = dgp_coefficients(cfg.form, zbar)
    cfg = replace(cfg, application="pricing-linear-demand")
    return SyntheticData(LoggedDataset(a - b * price + eps, price, z), TrueModel(cfg))


def generate_quadratic_data(cfg: DgpConfig) -> SyntheticData:
    """Revenue r = a(zbar) p - b(zbar) p^2 + eps; same contexts and prices as the demand DGP."""
    rng = np.random.default_rng(cfg.seed)
    z, zbar = _contexts(cfg, rng)
    price = rng.normal(zbar, 1.0)
    eps = rng.normal(0.0, cfg.noise, cfg.n)
    a, b = dgp_coefficients(cfg.form, zbar)
    cfg = replace(cfg, application="pricing-quadratic-revenue")
    return SyntheticData(LoggedDataset(a * price - b * price ** 2 + eps, price, z), TrueModel(cfg))


def generate_resource_data(cfg: DgpConfig) -> SyntheticData:
    """y = a(zbar) a1 + b(zbar) a2 + eps with a1, a2 i.i.d. N(zbar, 1)."""
    rng = np.random.default_rng(cfg.seed)
    z, zbar = _contexts(cfg, rng)
    actions = rng.normal(zbar[:, None], 1.0, size=(cfg.n, 2))
    eps = rng.normal(0.0, cfg.noise, cfg.n)
    a, b = dgp_coefficients(cfg.form, zbar)
    cfg = replace(cfg, application="resource-allocation")
    y = a * actions[:, 0] + b * actions[:, 1] + eps
    return SyntheticData(LoggedDataset(y, actions, z), TrueModel(cfg))


def generate(cfg: DgpConfig) -> SyntheticData:
    return {
        "pricing-linear-demand": generate_pricing_data,
        "pricing-quadratic-revenue": generate_quadratic_data,
        "resource-allocation": generate_resource_data,
    }[cfg.application](cfg)


def dump_csv(data: LoggedDataset, path) -> None:
    """Write columns y, a_1..a_d, z_1..z_k with round-trip float formatting."""
    header = ["y"] + [f"a_{i + 1}" for i in range(data.d_a)] + [f"z_{i + 1}" for i in range(data.k)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.column_stack([data.y, data.a, data.z]):
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# ground truth


def _zbar_density(l: int):
    if l == 1:
        return lambda t: 1.0, []
    if l == 3:
        # mean of three U(1, 2): 1 + S/3 with S Irwin-Hall(3)
        def dens(t):
            x = 3.0 * (t - 1.0)
            if x < 1.0:
                f = 0.5 * x * x
            elif x < 2.0:
                f = 0.5 * (-2.0 * x * x + 6.0 * x - 3.0)
            else:
                f = 0.5 * (3.0 - x) ** 2
            return 3.0 * f
        return dens, [1.0 + 1.0 / 3.0, 1.0 + 2.0 / 3.0]
    return None, None


def expect_zbar(fn: Callable[[float], float], l: int) -> Optional[float]:
    """E[fn(zbar)] by quadrature, or None when the zbar law has no closed form here."""
    dens, breaks = _zbar_density(l)
    if dens is None:
        return None
    points = sorted(set(breaks + [1.5]))
    val, _ = integrate.quad(lambda t: fn(t) * dens(t), 1.0, 2.0, points=points,
                            limit=200, epsabs=1e-13, epsrel=1e-12)
    return float(val)


def _mc_chunks(cfg: DgpConfig, draws: int, seed: int = ORACLE_SEED, chunk: int = 1_000_000):
    rng = np.random.default_rng(seed)
    left = draws
    while left > 0:
        m = min(chunk, left)
        left -= m
        yield rng.uniform(1.0, 2.0, size=(m, cfg.k))


@lru_cache(maxsize=64)
def context_moments(cfg: DgpConfig):
    """(E[a z], E[b z], E[b z z'], E[z z']) for the linear-policy closed forms.

    Quadrature when zbar is the first coordinate, otherwise 1e7-draw Monte-Carlo
    with a fixed seed.
    """
    k, l = cfg.k, cfg.l
    Ezz = np.full((k, k), 2.25)
    np.fill_diagonal(Ezz, 7.0 / 3.0)
    if l == 1:
        def coef(t, which):
            return float(dgp_coefficients(cfg.form, t)[which])

        Ea, Eb = (expect_zbar(lambda t, w=w: coef(t, w), 1) for w in (0, 1))
        Eaz1 = expect_zbar(lambda t: coef(t, 0) * t, 1)
        Ebz1 = expect_zbar(lambda t: coef(t, 1) * t, 1)
        Ebz11 = expect_zbar(lambda t: coef(t, 1) * t * t, 1)
        Eaz = np.full(k, 1.5 * Ea)
        Ebz = np.full(k, 1.5 * Eb)
        Eaz[0], Ebz[0] = Eaz1, Ebz1
        Ebzz = Eb * Ezz.copy()
        Ebzz[0, 0] = Ebz11
        Ebzz[0, 1:] = Ebzz[1:, 0] = 1.5 * Ebz1
        return Eaz, Ebz, Ebzz, Ezz
    Eaz, Ebz, Ebzz = np.zeros(k), np.zeros(k), np.zeros((k, k))
    for z in _mc_chunks(cfg, ORACLE_DRAWS):
        a, b = dgp_coefficients(cfg.form, z[:, :l].mean(axis=1))
        Eaz += z.T @ a
        Ebz += z.T @ b
        Ebzz += (z * b[:, None]).T @ z
    return Eaz / ORACLE_DRAWS, Ebz / ORACLE_DRAWS, Ebzz / ORACLE_DRAWS, Ezz


def _linear_range(gamma: np.ndarray):
    # gamma'z over the unit-offset cube [1, 2]^k
    return float(np.minimum(gamma, 2 * gamma).sum()), float(np.maximum(gamma, 2 * gamma).sum())


def _summary_only(pi: Policy, cfg: DgpConfig) -> bool:
    return pi.form in ("constant", "summary-linear", "threshold", "sin") and pi.n_active == cfg.l


def _mc_value(cfg: DgpConfig, pi: Policy, draws: int, cost: float) -> float:
    total = 0.0
    for z in _mc_chunks(cfg, draws):
        a, b = dgp_coefficients(cfg.form, z[:, : cfg.l].mean(axis=1))
        act = pi(z)
        if cfg.application == "resource-allocation":
            v = a * act[:, 0] + b * act[:, 1] - 0.5 * cost * np.sum(act ** 2, axis=1)
        else:
            v = act[:, 0] * (a - b * act[:, 0])
        total += math.fsum(v)
    return total / draws


def true_policy_value(cfg: DgpConfig, pi: Policy, mc_draws: int = 10 ** 6, cost: float = 1.0) -> float:
    """Population value of ``pi`` under the DGP.

    Pricing: E[pi (a - b pi)]; resource: E[<theta, pi> - cost/2 |pi|^2].
    Closed forms (quadrature over zbar or context moments) are used where
    available, otherwise Monte-Carlo with ``mc_draws`` draws.
    """
    if cfg.application != "resource-allocation" and _summary_only(pi, cfg) and cfg.l in (1, 3):
        def integrand(t):
            z = np.full((1, cfg.k), t)
            p = float(pi(z)[0, 0])
            a, b = dgp_coefficients(cfg.form, t)
            return p * (float(a) - float(b) * p)
        return expect_zbar(integrand, cfg.l)
    if cfg.application != "resource-allocation" and pi.form == "linear":
        g = pi.params
        lo, hi = _linear_range(g)
        if lo >= pi.action_low and hi <= pi.action_high:
            Eaz, _, Ebzz, _ = context_moments(cfg.truth_key)
            return float(g @ Eaz - g @ Ebzz @ g)
    if cfg.application == "resource-allocation" and pi.form == "multitask":
        Eaz, Ebz, _, Ezz = context_moments(cfg.truth_key)
        A = pi.params
        if A.shape == (2, cfg.k) and np.isinf(pi.action_low) and np.isinf(pi.action_high):
            E_theta_z = np.vstack([Eaz, Ebz])
            return float(np.sum(A * E_theta_z) - 0.5 * cost * np.trace(A @ Ezz @ A.T))
    if mc_draws < 1:
        raise InvalidInputError("mc_draws must be positive when no closed form applies")
    return _mc_value(cfg, pi, mc_draws, cost)


@lru_cache(maxsize=64)
def best_in_class(cfg: DgpConfig, family: str, cost: float = 1.0):
    """(policy, true value) of the population maximiser over a policy family."""
    cfg = cfg.truth_key
    Eaz, Ebz, Ebzz, Ezz = context_moments(cfg)
    if family == "multitask":
        if cfg.application != "resource-allocation":
            raise InvalidInputError("multitask policies belong to the resource application")
        E_theta_z = np.vstack([Eaz, Ebz])
        A = np.linalg.solve(Ezz, E_theta_z.T).T / cost
        pi = Policy.multitask(A)
        return pi, true_policy_value(cfg, pi, ORACLE_DRAWS, cost)
    if cfg.application == "resource-allocation":
        raise InvalidInputError(f"no {family} family for the resource application")
    if family == "constant":
        def mean_coef(w):
            v = expect_zbar(lambda t: float(dgp_coefficients(cfg.form, t)[w]), cfg.l)
            if v is None:
                v = sum(math.fsum(dgp_coefficients(cfg.form, z[:, : cfg.l].mean(axis=1))[w])
                        for z in _mc_chunks(cfg, ORACLE_DRAWS)) / ORACLE_DRAWS
            return v
        Ea, Eb = mean_coef(0), mean_coef(1)
        gamma = float(np.clip(Ea / (2 * Eb), *PRICE_BOX))
        pi = Policy.constant(gamma, n_active=cfg.l, action_low=PRICE_BOX[0], action_high=PRICE_BOX[1])
        return pi, true_policy_value(cfg, pi, ORACLE_DRAWS)
    if family == "linear":
        gamma = np.clip(np.linalg.solve(2.0 * Ebzz, Eaz), *LINEAR_GAMMA_BOX)
        pi = Policy.linear(gamma, n_active=cfg.l, action_low=PRICE_BOX[0], action_high=PRICE_BOX[1])
        return pi, true_policy_value(cfg, pi, ORACLE_DRAWS)
    raise InvalidInputError(f"unknown policy family {family!r}")


def evaluation_policies(cfg: DgpConfig) -> dict:
    """The four pricing policies of the evaluation study, acting on zbar."""
    l = cfg.l
    return {
        "constant": Policy.constant(1.0, n_active=l),
        "linear": Policy.summary_linear(1.0, n_active=l),
        "threshold": Policy.threshold(n_active=l),
        "sin": Policy.sin(n_active=l),
    }


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class ReplicationRecord:
    sim: int
    form: str
    regime: str
    policy: str
    estimator: str
    n: int
    value: float
    true_value: float
    regret: Optional[float] = None

    @property
    def cell(self) -> tuple:
        return (self.form, self.regime, self.policy, self.estimator, self.n)


@dataclass
class CellStats:
    mean: float
    std: float
    sims: int
    true_value: float
    mean_regret: Optional[float] = None
    std_regret: Optional[float] = None
    single: bool = False


@dataclass
class ExperimentResult:
    records: list = field(default_factory=list)
    cells: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)  # (n, sim, message)
    dropped: list = field(default_factory=list)

    def merge(self, other: "ExperimentResult") -> "ExperimentResult":
        cells = dict(self.cells)
        cells.update(other.cells)
        return ExperimentResult(self.records + other.records, cells,
                                self.failures + other.failures, self.dropped + other.dropped)

    @property
    def partial_failure(self) -> bool:
        return bool(self.failures)


def _mean_std(values: Sequence[float]):
    n = len(values)
    mean = math.fsum(values) / n
    if n == 1:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))


def aggregate_stats(records: Sequence[ReplicationRecord]) -> dict:
    """Per-cell sample mean and (n-1) std of values and regrets.

    Sums are exactly rounded, so aggregates do not depend on record order.
    """
    groups: dict = {}
    for r in records:
        groups.setdefault(r.cell, []).append(r)
    out = {}
    for key in sorted(groups):
        recs = groups[key]
        mean, std = _mean_std([r.value for r in recs])
        regrets = [r.regret for r in recs if r.regret is not None]
        mr = sr = None
        if regrets:
            mr, sr = _mean_std(regrets)
        out[key] = CellStats(mean, std, len(recs), recs[0].true_value, mr, sr, single=len(recs) == 1)
    return out


# ---------------------------------------------------------------------------
# replication runner


@dataclass(frozen=True)
class BenchSettings:
    poly: PolyFeatureConfig = PolyFeatureConfig()
    split: tuple = (0.5, 0.25, 0.25)
    mu: MuRule = MuRule()
    eval_fit_fraction: float = 0.5
    crossfit: bool = False
    cost: float = 1.0
    mc_draws: int = 10 ** 6
    workers: Optional[int] = None


def worker_count(settings: BenchSettings) -> int:
    if settings.workers is not None:
        return max(1, int(settings.workers))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def sim_seeds(master_seed: int, sim: int, n_streams: int):
    """Independent per-replication seeds derived from (master seed, replication id)."""
    ss = np.random.SeedSequence([int(master_seed), int(sim)])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n_streams)]


def _run(fn, tasks, workers: int):
    if workers == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _guarded(fn, task):
    try:
        return fn(task), None
    except Exception as exc:  # per-replication failures are recorded, not fatal
        return None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"


def _collect(outputs, tasks, n: int, sims: int, result: ExperimentResult):
    failed = []
    for task, (recs, err) in zip(tasks, outputs):
        if err is not None:
            failed.append(task[1])
            result.failures.append((n, task[1], err))
        else:
            result.records.extend(recs)
    cells = aggregate_stats([r for r in result.records if r.n == n])
    if failed and len(failed) > 0.1 * sims:
        result.dropped.extend(sorted(cells))
        cells = {}
    result.cells.update(cells)
    return result


def _eval_sim(task):
    cfg, sim, seed, policies, estimators, settings = task
    data_seed, split_seed, fit_seed = sim_seeds(seed, sim, 3)
    syn = generate(replace(cfg, seed=data_seed))
    fmap = feature_map_for(cfg.application)
    objective = objective_for(cfg.application, settings.cost)
    data, truth = syn
    true_nuis = truth.nuisances()
    if settings.crossfit:
        from .estimators import crossfit_records

        eval_data = data
        rows = np.arange(data.n)
        nuis = None
        records = {"dr": crossfit_records(
            data, fmap, lambda d, i: fit_nuisances(d, fmap, settings.poly, fit_seed + i), split_seed)}
        if {"direct", "ips"} & set(estimators):
            perm = np.random.default_rng(split_seed).permutation(data.n)
            nuis = fit_nuisances(data.subset(np.sort(perm[: data.n // 2])), fmap, settings.poly, fit_seed)
    else:
        perm = np.random.default_rng(split_seed).permutation(data.n)
        n_fit = int(round(settings.eval_fit_fraction * data.n))
        fit_rows, rows = np.sort(perm[:n_fit]), np.sort(perm[n_fit:])
        eval_data = data.subset(rows)
        nuis = fit_nuisances(data.subset(fit_rows), fmap, settings.poly, fit_seed)
        records = {}
    for est in estimators:
        if est in records:
            continue
        if est == "dr":
            records[est] = make_dr_records(eval_data, fmap, nuis, rows)
        elif est == "direct":
            records[est] = direct_records(eval_data, nuis.theta, rows)
        elif est == "ips":
            records[est] = ips_records(eval_data, fmap, nuis.sigma, rows)
        elif est == "oracle":
            records[est] = DrRecords(theta_dr_batch(eval_data, fmap, true_nuis), eval_data.z, rows)
        else:
            raise InvalidInputError(f"unknown estimator {est!r}")
    out = []
    for pname, pi in policies.items():
        truth_value = true_policy_value(cfg, pi, settings.mc_draws, settings.cost)
        for est in estimators:
            v = policy_value(records[est], pi, objective).point
            out.append(ReplicationRecord(sim, cfg.form, cfg.regime, pname, est, cfg.n, v, truth_value))
    return out


def _guarded_eval(task):
    return _guarded(_eval_sim, task)


def run_evaluation_experiment(cfg: DgpConfig, policies: Optional[dict] = None,
                              estimators: Sequence[str] = ESTIMATORS, sims: int = 100, seed: int = 0,
                              settings: BenchSettings = BenchSettings()) -> ExperimentResult:
    """Monte-Carlo off-policy evaluation study for one (DGP, n) configuration."""
    if sims < 1:
        raise InvalidInputError("sims must be at least 1")
    if cfg.application == "resource-allocation":
        raise InvalidInputError("the evaluation study covers the pricing applications")
    policies = evaluation_policies(cfg) if policies is None else dict(policies)
    tasks = [(cfg, m, seed, policies, tuple(estimators), settings) for m in range(sims)]
    outputs = _run(_guarded_eval, tasks, worker_count(settings))
    return _collect(outputs, tasks, cfg.n, sims, ExperimentResult())


def regret_label(family: str) -> str:
    """Row label of a learned-policy cell (kept apart from the evaluation policies)."""
    return f"erm-{family}"


def regret_space(cfg: DgpConfig, family: str) -> PolicySpace:
    if family == "multitask":
        return PolicySpace("multitask", [0.0], [0.0])
    return pricing_space(family, k=cfg.k, n_active=cfg.l)


def _regret_sim(task):
    cfg, sim, seed, families, learners, settings = task
    data_seed, split_seed, fit_seed, erm_seed = sim_seeds(seed, sim, 4)
    data, truth = generate(replace(cfg, seed=data_seed))
    fmap = feature_map_for(cfg.application)
    objective = objective_for(cfg.application, settings.cost)
    true_nuis = truth.nuisances()
    s1, sv, st = SplitConfig(settings.split, split_seed).split(data.n)
    s1, sv, st = np.sort(s1), np.sort(sv), np.sort(st)
    nuis = None
    if set(learners) - {"oracle"}:
        nuis = fit_nuisances(data.subset(s1), fmap, settings.poly, fit_seed)
    out = []
    for family in families:
        best_pi, best_val = best_in_class(cfg, family, settings.cost)
        for learner in learners:
            if family == "multitask":
                s2 = np.sort(np.concatenate([sv, st]))
                recs = build_records(learner, data.subset(s2), fmap, nuis, true_nuis, s2)
                pi = multitask_lasso_cv(recs, lambda_cost=settings.cost, seed=erm_seed).policy()
            else:
                space = regret_space(cfg, family)
                rv = build_records(learner, data.subset(sv), fmap, nuis, true_nuis, sv)
                rt = build_records(learner, data.subset(st), fmap, nuis, true_nuis, st)
                pi = regularized_erm_from_records(rv, rt, space, objective, settings.mu, erm_seed).policy
            val = true_policy_value(cfg, pi, settings.mc_draws, settings.cost)
            out.append(ReplicationRecord(sim, cfg.form, cfg.regime, regret_label(family), learner, cfg.n, val,
                                         best_val, best_val - val))
    return out


def _guarded_regret(task):
    return _guarded(_regret_sim, task)


def run_regret_experiment(cfg: DgpConfig, space="constant", learners: Sequence[str] = LEARNERS,
                          sims: int = 100, seed: int = 0,
                          settings: BenchSettings = BenchSettings()) -> ExperimentResult:
    """Learn a policy per learner and replication; regret against the best in class.

    ``space`` is a family name or a list of names. Cells are labelled
    ``erm-<family>``; one reference row (estimator ``best-in-class``, sims 0)
    is added per family.
    """
    if sims < 1:
        raise InvalidInputError("sims must be at least 1")
    families = (space,) if isinstance(space, str) else tuple(space)
    for f in families:
        if (f == "multitask") != (cfg.application == "resource-allocation"):
            raise InvalidInputError(f"policy family {f!r} does not fit {cfg.application}")
    for learner in learners:
        if learner not in LEARNERS:
            raise InvalidInputError(f"unknown learner {learner!r}")
    tasks = [(cfg, m, seed, families, tuple(learners), settings) for m in range(sims)]
    outputs = _run(_guarded_regret, tasks, worker_count(settings))
    result = _collect(outputs, tasks, cfg.n, sims, ExperimentResult())
    for f in families:
        _, best_val = best_in_class(cfg, f, settings.cost)
        result.cells[(cfg.form, cfg.regime, regret_label(f), "best-in-class", cfg.n)] = CellStats(
            best_val, 0.0, 0, best_val, 0.0, 0.0)
    return result
