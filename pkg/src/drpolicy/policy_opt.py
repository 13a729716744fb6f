"""Policy learners: ERM over candidate sets, out-of-sample regularised ERM,
closed-form pricing maximisers and the multi-task group-lasso policy."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._kernels import group_cd
from .core import (FeatureMap, InvalidInputError, LoggedDataset, NuisancePair, Policy,
                   PolicySpace, pricing_space)
from .estimators import (DrRecords, Objective, direct_records, ips_records, make_dr_records,
                         theta_dr_batch)
from .nuisance import ConvergenceWarning, PolyFeatureConfig, fit_nuisances, fold_ids

LEARNERS = ("dr", "direct", "ips", "oracle")


@dataclass(frozen=True)
class SplitConfig:
    """Fractions for (nuisance S1, validation S2v, training S2t)."""

    fractions: tuple = (0.5, 0.25, 0.25)
    seed: int = 0

    def __post_init__(self):
        f = tuple(float(x) for x in self.fractions)
        if len(f) != 3 or any(x <= 0 for x in f) or abs(sum(f) - 1.0) > 1e-9:
            raise InvalidInputError(f"split fractions must be three positive numbers summing to 1, got {f}")
        object.__setattr__(self, "fractions", f)

    def split(self, n: int):
        perm = np.random.default_rng(self.seed).permutation(n)
        n1 = int(round(self.fractions[0] * n))
        nv = int(round(self.fractions[1] * n))
        parts = (perm[:n1], perm[n1:n1 + nv], perm[n1 + nv:])
        if any(len(p) == 0 for p in parts):
            raise InvalidInputError(f"n={n} leaves an empty split for fractions {self.fractions}")
        return parts


@dataclass(frozen=True)
class MuRule:
    """Slack rule mu_n = c * r_hat * sqrt(log(1/delta) / n_validation).

    ``fixed`` overrides the rule with a constant (e.g. 0 or inf).
    """

    c: float = 2.0
    delta: float = 0.1
    fixed: Optional[float] = None

    def __post_init__(self):
        if self.fixed is None and (self.c <= 0 or not 0 < self.delta < 1):
            raise InvalidInputError("need c > 0 and 0 < delta < 1")


def mu_n(r_hat: float, n_validation: int, rule: MuRule = MuRule()) -> float:
    if rule.fixed is not None:
        return float(rule.fixed)
    if n_validation < 1:
        raise InvalidInputError("validation sample must be nonempty")
    return rule.c * r_hat * math.sqrt(math.log(1.0 / rule.delta) / n_validation)


# ---------------------------------------------------------------------------
# candidate evaluation


def _pricing_contributions(records: DrRecords, params: np.ndarray, space: PolicySpace) -> np.ndarray:
    if space.family == "constant":
        prices = np.broadcast_to(np.clip(params[:, :1], space.action_low, space.action_high),
                                 (params.shape[0], len(records)))
    else:
        prices = np.clip(params @ records.z.T, space.action_low, space.action_high)
    return prices * records.theta[:, 0] + prices ** 2 * records.theta[:, 1]


def candidate_contributions(records: DrRecords, params: np.ndarray, space: PolicySpace,
                            objective: Objective) -> np.ndarray:
    """Per-record contributions for every candidate, shape (n_candidates, n)."""
    params = np.atleast_2d(np.asarray(params, dtype=float))
    if objective.is_pricing and space.family in ("constant", "linear"):
        return _pricing_contributions(records, params, space)
    out = np.empty((params.shape[0], len(records)))
    for i, c in enumerate(params):
        pi = space.make(c)
        out[i] = objective.contributions(records.theta, records.z, pi(records.z))
    return out


def candidate_values(records: DrRecords, params: np.ndarray, space: PolicySpace,
                     objective: Objective, block: int = 256) -> np.ndarray:
    params = np.atleast_2d(np.asarray(params, dtype=float))
    vals = np.empty(params.shape[0])
    for s in range(0, params.shape[0], block):
        vals[s:s + block] = candidate_contributions(records, params[s:s + block], space,
                                                    objective).mean(axis=1)
    return vals


def argmax_lexicographic(values: np.ndarray, params: np.ndarray, mask=None) -> int:
    """Index of the best value; ties go to the lexicographically smallest parameters."""
    values = np.asarray(values, dtype=float)
    idx = np.arange(values.size) if mask is None else np.flatnonzero(mask)
    if idx.size == 0:
        raise InvalidInputError("empty candidate set")
    best = values[idx].max()
    tied = idx[values[idx] == best]
    if tied.size == 1:
        return int(tied[0])
    keys = params[tied].reshape(tied.size, -1)
    order = np.lexsort(keys.T[::-1])
    return int(tied[order[0]])


def _unique_rows(params: np.ndarray) -> np.ndarray:
    # deterministic order: first occurrence kept
    _, first = np.unique(params, axis=0, return_index=True)
    return params[np.sort(first)]


# ---------------------------------------------------------------------------
# closed-form pricing maximisers


def _pricing_value(records: DrRecords, gamma: float) -> float:
    return float(gamma * records.a_dr.mean() - gamma ** 2 * records.b_dr.mean())


def optimize_constant_pricing(records: DrRecords, space: Optional[PolicySpace] = None) -> Policy:
    """Maximiser of gamma * mean(a_DR) - gamma^2 * mean(b_DR) over the price box."""
    space = space or pricing_space("constant")
    lo, hi = float(space.low[0]), float(space.high[0])
    a_bar, b_bar = records.a_dr.mean(), records.b_dr.mean()
    if b_bar > 0:
        gamma = float(np.clip(a_bar / (2.0 * b_bar), lo, hi))
    else:
        gamma = hi if _pricing_value(records, hi) > _pricing_value(records, lo) else lo
    return space.make([gamma])


def linear_pricing_solution(records: DrRecords, contexts=None) -> np.ndarray:
    """Stationary point of sum_i (g'z_i) a_i - (g'z_i)^2 b_i, i.e. 2 M g = v."""
    z = records.z if contexts is None else np.asarray(contexts, dtype=float)
    M = (z * records.b_dr[:, None]).T @ z
    v = z.T @ records.a_dr
    k = z.shape[1]
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        M = M + 1e-6 * np.trace(M) / k * np.eye(k)
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            # no concave maximiser; fall back to the least-squares direction
            return np.linalg.lstsq(2.0 * M, v, rcond=None)[0]
    return np.linalg.solve(2.0 * M, v)


def optimize_linear_pricing(records: DrRecords, contexts=None, space: Optional[PolicySpace] = None,
                            seed=0) -> Policy:
    """Quadratic-solve maximiser, box-clipped and re-scored against random candidates."""
    z = records.z if contexts is None else np.asarray(contexts, dtype=float)
    recs = records if contexts is None else DrRecords(records.theta, z, records.rows)
    space = space or pricing_space("linear", k=z.shape[1])
    gamma = space.clip(linear_pricing_solution(recs))
    cands = np.vstack([gamma[None, :], space.candidates(seed)])
    vals = _pricing_contributions(recs, cands, space).mean(axis=1)
    return space.make(cands[argmax_lexicographic(vals, cands)])


def closed_form_params(records: DrRecords, space: PolicySpace, objective: Objective) -> Optional[np.ndarray]:
    """Closed-form maximiser parameters for pricing families, else None."""
    if not objective.is_pricing:
        return None
    if space.family == "constant":
        return optimize_constant_pricing(records, space).params.copy()
    if space.family == "linear":
        return space.clip(linear_pricing_solution(records))
    return None


def erm(records: DrRecords, space: PolicySpace, objective: Objective, seed=0,
        candidates=None, include_closed_form: bool = True) -> Policy:
    """Empirical value maximiser over a candidate set.

    Without explicit ``candidates`` the set is generated from the space; the
    closed-form pricing maximiser is added when available.
    """
    params = space.candidates(seed) if candidates is None else np.atleast_2d(
        np.asarray(candidates, dtype=float))
    if include_closed_form:
        cf = closed_form_params(records, space, objective)
        if cf is not None:
            params = np.vstack([params, cf[None, :]])
    if params.shape[0] == 0:
        raise InvalidInputError("empty candidate set")
    vals = candidate_values(records, params, space, objective)
    return space.make(params[argmax_lexicographic(vals, params)])


# ---------------------------------------------------------------------------
# out-of-sample regularised ERM


@dataclass
class RegularizedErmTrace:
    policy: Policy
    pi1: Policy
    mu: float
    r_hat: float
    candidates: np.ndarray
    feasible: np.ndarray
    validation_values: np.ndarray
    training_values: np.ndarray
    nuisances: Optional[NuisancePair] = None
    meta: dict = field(default_factory=dict)


def build_records(learner: str, data: LoggedDataset, fmap: FeatureMap,
                  nuis: Optional[NuisancePair], true_nuis: Optional[NuisancePair] = None,
                  rows=None) -> DrRecords:
    """Per-row coefficient records for the DR, Direct, IPS or Oracle learner."""
    if learner == "dr":
        return make_dr_records(data, fmap, nuis, rows)
    if learner == "direct":
        return direct_records(data, nuis.theta, rows)
    if learner == "ips":
        return ips_records(data, fmap, nuis.sigma, rows)
    if learner == "oracle":
        if true_nuis is None:
            raise InvalidInputError("oracle learner needs the true nuisances")
        rows = np.arange(data.n) if rows is None else np.asarray(rows)
        return DrRecords(theta_dr_batch(data, fmap, true_nuis), data.z, rows)
    raise InvalidInputError(f"unknown learner {learner!r}")


def _seeds(seed, n: int):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def regularized_erm_from_records(records_v: DrRecords, records_t: DrRecords, space: PolicySpace,
                                 objective: Objective, mu: MuRule = MuRule(),
                                 seed=0) -> RegularizedErmTrace:
    """Validation ERM, slack-constrained candidate class, then training ERM."""
    s_base, s_pert_v, s_pert_t, s_pert_1 = _seeds(seed, 4)
    params = [space.candidates(s_base)]
    anchors = []
    for recs, s in ((records_v, s_pert_v), (records_t, s_pert_t)):
        cf = closed_form_params(recs, space, objective)
        if cf is not None:
            params.append(cf[None, :])
            anchors.append((cf, s))
    if space.family == "linear":
        params += [space.perturb(cf, s) for cf, s in anchors]
    params = _unique_rows(np.vstack(params))

    vals_v = candidate_values(records_v, params, space, objective)
    i1 = argmax_lexicographic(vals_v, params)
    pi1_params = params[i1].copy()
    if space.family == "linear":
        extra = space.perturb(pi1_params, s_pert_1)
        params = _unique_rows(np.vstack([params, extra]))
        vals_v = candidate_values(records_v, params, space, objective)
        i1 = int(np.flatnonzero(np.all(params == pi1_params, axis=1))[0])

    contrib_v = np.vstack([candidate_contributions(records_v, params[s:s + 256], space, objective)
                           for s in range(0, params.shape[0], 256)])
    r_hat = float(np.sqrt((contrib_v ** 2).mean(axis=1)).max())
    mu_val = mu_n(r_hat, len(records_v), mu)
    slack = (contrib_v[i1][None, :] - contrib_v).mean(axis=1)
    feasible = slack <= mu_val
    feasible[i1] = True

    vals_t = candidate_values(records_t, params, space, objective)
    i2 = argmax_lexicographic(vals_t, params, feasible)
    return RegularizedErmTrace(space.make(params[i2]), space.make(pi1_params), mu_val, r_hat,
                               params, feasible, vals_v, vals_t,
                               meta={"slack": slack, "pi1_index": i1, "index": i2})


def regularized_erm_trace(data: LoggedDataset, fmap: FeatureMap, space: PolicySpace,
                          objective: Objective, split: SplitConfig = SplitConfig(),
                          mu: MuRule = MuRule(), seed=0, learner: str = "dr",
                          poly: PolyFeatureConfig = PolyFeatureConfig(),
                          true_nuisances: Optional[NuisancePair] = None,
                          nuisances: Optional[NuisancePair] = None) -> RegularizedErmTrace:
    """Nuisances on S1, ERM on S2v, slack-constrained ERM on S2t (same nuisances)."""
    s1, sv, st = split.split(data.n)
    fit_seed, erm_seed = _seeds(seed, 2)
    if nuisances is None and learner != "oracle":
        nuisances = fit_nuisances(data.subset(s1), fmap, poly, fit_seed)
    rec_v = build_records(learner, data.subset(sv), fmap, nuisances, true_nuisances, sv)
    rec_t = build_records(learner, data.subset(st), fmap, nuisances, true_nuisances, st)
    trace = regularized_erm_from_records(rec_v, rec_t, space, objective, mu, erm_seed)
    trace.nuisances = nuisances
    return trace


def regularized_erm(data: LoggedDataset, fmap: FeatureMap, space: PolicySpace,
                    objective: Objective, split: SplitConfig = SplitConfig(),
                    mu: MuRule = MuRule(), seed=0, **kw) -> Policy:
    return regularized_erm_trace(data, fmap, space, objective, split, mu, seed, **kw).policy


# ---------------------------------------------------------------------------
# multi-task group lasso policy


MT_TOL = 1e-10
MT_MAX_ITER = 10_000


@dataclass
class MultiTaskFit:
    A: np.ndarray  # (d_a, k)
    s_penalty: float
    n_iter: int
    converged: bool
    objective: list = field(default_factory=list)

    def policy(self) -> Policy:
        return Policy.multitask(self.A)


def _mt_objective(T, Z, W, s):
    return float(np.sum((T - Z @ W) ** 2) + s * np.linalg.norm(W, axis=1).sum())


def group_lambda_max(targets, contexts) -> float:
    """Smallest group penalty for which A = 0."""
    T = np.asarray(targets, dtype=float)
    Z = np.asarray(contexts, dtype=float)
    return float(np.linalg.norm(2.0 * Z.T @ T, axis=1).max())


def multitask_lasso_fit(targets, contexts, s_penalty: float, tol: float = MT_TOL,
                        max_iter: int = MT_MAX_ITER, warm_start=None,
                        trace: bool = False) -> MultiTaskFit:
    """Minimise sum_i ||T_i - A z_i||^2 + s * sum_j ||A[:, j]||_2 by block coordinate descent."""
    T = np.atleast_2d(np.asarray(targets, dtype=float))
    Z = np.atleast_2d(np.asarray(contexts, dtype=float))
    if T.shape[0] != Z.shape[0]:
        raise InvalidInputError("targets and contexts have different row counts")
    if s_penalty < 0:
        raise InvalidInputError("penalty must be non-negative")
    G = Z.T @ Z
    C = Z.T @ T
    W = np.zeros((Z.shape[1], T.shape[1])) if warm_start is None else np.array(warm_start, dtype=float).T.copy()
    history = []
    if trace:
        history.append(_mt_objective(T, Z, W, s_penalty))
        n_iter, converged = 0, False
        while n_iter < max_iter and not converged:
            _, converged = group_cd(G, C, W, s_penalty, tol, 1)
            n_iter += 1
            history.append(_mt_objective(T, Z, W, s_penalty))
    else:
        n_iter, converged = group_cd(G, C, W, s_penalty, tol, max_iter)
    if not converged:
        warnings.warn(f"multi-task lasso did not converge in {max_iter} sweeps",
                      ConvergenceWarning, stacklevel=2)
    return MultiTaskFit(W.T.copy(), float(s_penalty), n_iter, converged, history)


def multitask_lasso_policy(records: DrRecords, contexts=None, lambda_cost: float = 1.0,
                           s_penalty: float = 0.0) -> Policy:
    """Policy z -> A z from the group lasso on labels theta_DR / lambda_cost."""
    if lambda_cost <= 0:
        raise InvalidInputError("cost weight must be positive")
    Z = records.z if contexts is None else contexts
    return multitask_lasso_fit(records.theta / lambda_cost, Z, s_penalty).policy()


def multitask_lasso_cv(records: DrRecords, contexts=None, lambda_cost: float = 1.0,
                       folds: int = 5, seed=0, n_alphas: int = 50,
                       ratio: float = 1e-3) -> MultiTaskFit:
    """K-fold CV over the per-observation penalty alpha (s = alpha * n_train)."""
    if lambda_cost <= 0:
        raise InvalidInputError("cost weight must be positive")
    T = records.theta / lambda_cost
    Z = np.asarray(records.z if contexts is None else contexts, dtype=float)
    n = T.shape[0]
    if n < folds:
        raise InvalidInputError(f"n={n} is smaller than the number of folds ({folds})")
    a_max = group_lambda_max(T, Z) / n
    alphas = np.geomspace(a_max, ratio * a_max, n_alphas) if a_max > 0 else np.array([0.0])
    ids = fold_ids(n, folds, seed)
    err = np.zeros((folds, alphas.size))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for f in range(folds):
            tr, te = ids != f, ids == f
            G = Z[tr].T @ Z[tr]
            C = Z[tr].T @ T[tr]
            W = np.zeros((Z.shape[1], T.shape[1]))
            for i, a in enumerate(alphas):
                group_cd(G, C, W, a * tr.sum(), MT_TOL, MT_MAX_ITER)
                err[f, i] = np.mean(np.sum((T[te] - Z[te] @ W) ** 2, axis=1))
    best = int(np.argmin(err.mean(axis=0)))
    fit = multitask_lasso_fit(T, Z, alphas[best] * n)
    return fit
