"""Off-policy value estimators built on the doubly robust coefficient theta_DR."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import (FeatureMap, InvalidInputError, LoggedDataset, NuisancePair, Policy,
                   SingularCovarianceError, _as_2d)

RIDGE = 1e-8
MAX_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class ValueEstimate:
    point: float
    contributions: np.ndarray
    se: float

    @classmethod
    def from_contributions(cls, contributions) -> "ValueEstimate":
        c = np.asarray(contributions, dtype=float)
        if c.size == 0:
            raise InvalidInputError("no contributions to average")
        se = float(np.std(c, ddof=1) / np.sqrt(c.size)) if c.size > 1 else 0.0
        return cls(float(np.mean(c)), c, se)


@dataclass(frozen=True, eq=False)
class DrRecords:
    """Per-observation coefficient estimates, reusable across policies.

    ``theta`` is (n, p); ``z`` the matching (n, k) contexts; ``rows`` the
    source row indices. For pricing maps theta = (a, -b).
    """

    theta: np.ndarray
    z: np.ndarray
    rows: np.ndarray

    def __len__(self) -> int:
        return self.theta.shape[0]

    def __getitem__(self, i) -> "DrRecords":
        idx = np.atleast_1d(np.arange(len(self))[i])
        return DrRecords(self.theta[idx], self.z[idx], self.rows[idx])

    @property
    def a_dr(self) -> np.ndarray:
        return self.theta[:, 0]

    @property
    def b_dr(self) -> np.ndarray:
        return -self.theta[:, 1]


# ---------------------------------------------------------------------------
# objectives


@dataclass(frozen=True, eq=False)
class Objective:
    """How a coefficient vector and an action turn into a value.

    kinds: ``inner`` <theta, phi(a, z)>; ``demand-revenue`` a * <theta, phi(a, z)>
    (phi = (1, p) demand model); ``resource`` <theta, a> - cost/2 * |a|^2.
    """

    kind: str
    fmap: Optional[FeatureMap] = None
    cost: float = 1.0

    def __post_init__(self):
        if self.kind not in ("inner", "demand-revenue", "resource"):
            raise InvalidInputError(f"unknown objective kind {self.kind!r}")
        if self.kind != "resource" and self.fmap is None:
            raise InvalidInputError(f"{self.kind} objective needs a feature map")

    @property
    def is_pricing(self) -> bool:
        """True when contributions reduce to price*theta_1 + price^2*theta_2."""
        if self.fmap is None:
            return False
        return ((self.kind == "demand-revenue" and self.fmap.kind == "pricing-linear")
                or (self.kind == "inner" and self.fmap.kind == "pricing-quadratic"))

    def contributions(self, theta: np.ndarray, z: np.ndarray, actions: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        actions = _as_2d(actions, "actions")
        if self.kind == "resource":
            return np.sum(theta * actions, axis=1) - 0.5 * self.cost * np.sum(actions ** 2, axis=1)
        inner = np.sum(theta * self.fmap(actions, z), axis=1)
        if self.kind == "demand-revenue":
            return actions[:, 0] * inner
        return inner


def revenue_objective(which: str) -> Objective:
    """Revenue objective for the linear-demand or quadratic-revenue model."""
    from .core import pricing_linear_map, pricing_quadratic_map

    if which == "linear-demand":
        return Objective("demand-revenue", pricing_linear_map())
    if which == "quadratic-revenue":
        return Objective("inner", pricing_quadratic_map())
    raise InvalidInputError(f"unknown revenue model {which!r}")


# ---------------------------------------------------------------------------
# covariance inversion


def invert_sigma(S, ridge: float = RIDGE, row: Optional[int] = None) -> np.ndarray:
    """Inverse of a symmetric matrix via Cholesky.

    Falls back to (S + ridge * tr(S)/p * I) when plain Cholesky fails and
    raises :class:`SingularCovarianceError` if that is still not positive
    definite or its condition number exceeds 1e12.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {S.shape}")
    p = S.shape[0]
    eye = np.eye(p)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        S_r = S + ridge * np.trace(S) / p * eye
        try:
            L = np.linalg.cholesky(S_r)
        except np.linalg.LinAlgError:
            raise SingularCovarianceError("covariance is singular even after ridge", row) from None
        if np.linalg.cond(S_r) > MAX_CONDITION:
            raise SingularCovarianceError("covariance is ill-conditioned after ridge", row)
    Linv = np.linalg.solve(L, eye)
    return Linv.T @ Linv


def invert_sigma_batch(S: np.ndarray, ridge: float = RIDGE) -> np.ndarray:
    """Row-wise :func:`invert_sigma` over an (n, p, p) stack.

    Errors from individual rows are collected and raised together.
    """
    S = np.asarray(S, dtype=float)
    try:
        L = np.linalg.cholesky(S)
        Linv = np.linalg.inv(L)
        return np.swapaxes(Linv, -1, -2) @ Linv
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(S)
    bad = []
    for i in range(S.shape[0]):
        try:
            out[i] = invert_sigma(S[i], ridge, row=i)
        except SingularCovarianceError:
            bad.append(i)
    if bad:
        shown = ", ".join(map(str, bad[:10])) + (" ..." if len(bad) > 10 else "")
        raise SingularCovarianceError(f"singular covariance at {len(bad)} rows: {shown}",
                                      bad[0])
    return out


# ---------------------------------------------------------------------------
# theta_DR and record builders


def theta_dr(y: float, a, z, fmap: FeatureMap, nuis: NuisancePair) -> np.ndarray:
    """theta_hat(z) + Sigma_hat(z)^{-1} phi(a, z) (y - <theta_hat(z), phi(a, z)>)."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    data = LoggedDataset(np.array([float(y)]), a[None, :], z[None, :])
    return theta_dr_batch(data, fmap, nuis)[0]


def theta_dr_batch(data: LoggedDataset, fmap: FeatureMap, nuis: NuisancePair) -> np.ndarray:
    phi = fmap(data.a, data.z)
    th = nuis.theta(data.z)
    resid = data.y - np.sum(th * phi, axis=1)
    sinv = invert_sigma_batch(nuis.sigma(data.z))
    out = th + np.einsum("nij,nj->ni", sinv, phi) * resid[:, None]
    if not np.all(np.isfinite(out)):
        raise InvalidInputError("theta_DR produced non-finite values")
    return out


def make_dr_records(data: LoggedDataset, fmap: FeatureMap, nuis: NuisancePair,
                    rows=None) -> DrRecords:
    """Doubly robust coefficient for every row; independent of any policy.

    Pricing nuisances carrying sufficient statistics use the closed forms.
    """
    rows = np.arange(data.n) if rows is None else np.asarray(rows)
    from .nuisance import PricingStats, QuadraticMoments

    if isinstance(nuis.stats, PricingStats) and fmap.kind == "pricing-linear":
        th = nuis.theta(data.z)
        a_dr, b_dr = theta_dr_pricing_linear(data.y, data.a[:, 0], th[:, 0], -th[:, 1],
                                             nuis.stats.g_hat(data.z), nuis.stats.sigma2)
        theta = np.column_stack([a_dr, -b_dr])
    elif isinstance(nuis.stats, QuadraticMoments) and fmap.kind == "pricing-quadratic":
        th = nuis.theta(data.z)
        st = nuis.stats
        a_dr, b_dr = theta_dr_pricing_quadratic(data.y, data.a[:, 0], th[:, 0], -th[:, 1],
                                                st.mu1_hat(data.z), st.muc2, st.muc3, st.muc4)
        theta = np.column_stack([a_dr, -b_dr])
    else:
        theta = theta_dr_batch(data, fmap, nuis)
    return DrRecords(theta, data.z, rows)


def direct_records(data: LoggedDataset, theta_hat: Callable, rows=None) -> DrRecords:
    """Plug-in records theta_hat(z)."""
    rows = np.arange(data.n) if rows is None else np.asarray(rows)
    return DrRecords(np.asarray(theta_hat(data.z), dtype=float), data.z, rows)


def ips_records(data: LoggedDataset, fmap: FeatureMap, sigma_hat: Callable, rows=None) -> DrRecords:
    """Inverse-covariance weighted records Sigma_hat(z)^{-1} phi(a, z) y."""
    rows = np.arange(data.n) if rows is None else np.asarray(rows)
    phi = fmap(data.a, data.z)
    s = np.asarray(sigma_hat(data.z), dtype=float)
    sinv = invert_sigma_batch(0.5 * (s + np.swapaxes(s, -1, -2)))
    theta = np.einsum("nij,nj->ni", sinv, phi) * data.y[:, None]
    return DrRecords(theta, data.z, rows)


# ---------------------------------------------------------------------------
# value estimators


def policy_value(records: DrRecords, pi: Policy, objective: Objective) -> ValueEstimate:
    if len(records) == 0:
        raise InvalidInputError("no records")
    actions = pi(records.z)
    return ValueEstimate.from_contributions(objective.contributions(records.theta, records.z, actions))


def value_dr(records: DrRecords, pi: Policy, fmap: FeatureMap) -> ValueEstimate:
    """Mean of <theta_DR, phi(pi(z), z)>."""
    return policy_value(records, pi, Objective("inner", fmap))


def value_dr_revenue(records: DrRecords, pi: Policy, which: str = "linear-demand") -> ValueEstimate:
    """Revenue pi(z) (a_DR - b_DR pi(z)).

    Both pricing models store theta = (a, -b), so the linear-demand revenue
    p * (a - b p) and the quadratic-revenue a p - b p^2 coincide per record.
    """
    if which not in ("linear-demand", "quadratic-revenue"):
        raise InvalidInputError(f"unknown revenue model {which!r}")
    if len(records) == 0:
        raise InvalidInputError("no records")
    price = pi(records.z)[:, 0]
    return ValueEstimate.from_contributions(price * (records.a_dr - records.b_dr * price))


def _objective_or_inner(fmap: FeatureMap, objective: Optional[Objective]) -> Objective:
    return Objective("inner", fmap) if objective is None else objective


def value_direct(data: LoggedDataset, fmap: FeatureMap, theta_hat: Callable, pi: Policy,
                 objective: Optional[Objective] = None) -> ValueEstimate:
    return policy_value(direct_records(data, theta_hat), pi, _objective_or_inner(fmap, objective))


def value_ips(data: LoggedDataset, fmap: FeatureMap, sigma_hat: Callable, pi: Policy,
              objective: Optional[Objective] = None) -> ValueEstimate:
    return policy_value(ips_records(data, fmap, sigma_hat), pi, _objective_or_inner(fmap, objective))


def value_oracle(data: LoggedDataset, fmap: FeatureMap, true_nuisances: NuisancePair, pi: Policy,
                 objective: Optional[Objective] = None) -> ValueEstimate:
    """The DR estimate with the true theta_0 and Sigma_0 plugged in."""
    recs = DrRecords(theta_dr_batch(data, fmap, true_nuisances), data.z, np.arange(data.n))
    return policy_value(recs, pi, _objective_or_inner(fmap, objective))


# ---------------------------------------------------------------------------
# closed-form special cases


def theta_dr_pricing_linear(d, p, a_hat, b_hat, g_hat, sigma2_hat):
    """Closed-form (a_DR, b_DR) for demand d = a(z) - b(z) p with homoskedastic prices.

    With e = d - (a_hat - b_hat p):
    a_DR = a_hat + (1 + g (g - p) / sigma2) e,  b_DR = b_hat - (p - g) / sigma2 * e.
    """
    if np.any(np.asarray(sigma2_hat) <= 0):
        raise InvalidInputError("price variance must be positive")
    d, p, a_hat, b_hat, g = (np.asarray(v, dtype=float) for v in (d, p, a_hat, b_hat, g_hat))
    e = d - (a_hat - b_hat * p)
    a_dr = a_hat + (1.0 + g * (g - p) / sigma2_hat) * e
    b_dr = b_hat - (p - g) / sigma2_hat * e
    return a_dr, b_dr


def theta_dr_pricing_quadratic(r, p, a_hat, b_hat, mu1, muc2, muc3, muc4):
    """Closed-form (a_DR, b_DR) for revenue r = a(z) p - b(z) p^2.

    The raw price moments mu2..mu4 are rebuilt from mu1(z) and the central
    moments; det = mu4 mu2 - mu3^2 must be positive.
    """
    from .nuisance import raw_moments_from_central

    r, p, a_hat, b_hat, mu1 = (np.asarray(v, dtype=float) for v in (r, p, a_hat, b_hat, mu1))
    mu2, mu3, mu4 = raw_moments_from_central(mu1, muc2, muc3, muc4)
    det = mu4 * mu2 - mu3 ** 2
    if np.any(det <= 0):
        bad = int(np.flatnonzero(np.atleast_1d(det <= 0))[0])
        raise SingularCovarianceError("non-positive price-moment determinant", bad)
    e = r - (a_hat * p - b_hat * p ** 2)
    a_dr = a_hat + (mu4 * p - mu3 * p ** 2) / det * e
    b_dr = b_hat - (mu2 * p ** 2 - mu3 * p) / det * e
    return a_dr, b_dr


def theta_dr_multiaction(y: float, action_index: int, theta_hat, propensities) -> np.ndarray:
    """Discrete-action DR: only the observed action's coordinate (1-based) is corrected."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    prop = np.asarray(propensities, dtype=float)
    if prop.shape != theta_hat.shape:
        raise InvalidInputError("theta_hat and propensities must have the same length")
    if not 1 <= action_index <= prop.size:
        raise InvalidInputError(f"action index {action_index} outside 1..{prop.size}")
    i = action_index - 1
    if prop[i] <= 0:
        raise InvalidInputError("zero propensity at the observed action")
    out = theta_hat.copy()
    out[i] += (y - theta_hat[i]) / prop[i]
    return out


def theta_dr_iv(y: float, a, z, w, fmap: FeatureMap, theta_hat, sigma_iv_hat) -> np.ndarray:
    """Instrumented DR: theta_hat + Sigma_I(z)^{-1} w (y - <theta_hat, phi(a, z)>).

    ``theta_hat`` and ``sigma_iv_hat`` are the values at z (p-vector and
    p x p matrix, E[w phi' | z]).
    """
    phi = fmap(np.atleast_1d(np.asarray(a, dtype=float))[None, :],
               np.atleast_1d(np.asarray(z, dtype=float))[None, :])[0]
    th = np.asarray(theta_hat, dtype=float)
    S = np.asarray(sigma_iv_hat, dtype=float)
    w = np.asarray(w, dtype=float)
    if S.shape != (th.size, th.size) or w.shape != th.shape:
        raise InvalidInputError("instrument and Sigma_I must match the feature dimension")
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > MAX_CONDITION:
        raise SingularCovarianceError("Sigma_I is singular")
    return th + np.linalg.solve(S, w) * (y - th @ phi)


def value_dr_semibandit(Y, a, z, fmap: FeatureMap, Theta_hat: Callable, sigma_hat: Callable,
                        pi: Policy) -> ValueEstimate:
    """DR value for V(a, z) = phi' Theta(z) phi with vector feedback E[Y | a, z] = Theta' phi.

    ``Theta_hat`` and ``sigma_hat`` map (n, k) contexts to (n, p, p) stacks.
    """
    Y = _as_2d(Y, "Y")
    a = _as_2d(a, "a")
    z = _as_2d(z, "z")
    phi = fmap(a, z)
    if Y.shape != phi.shape:
        raise InvalidInputError(f"Y must be (n, p) = {phi.shape}, got {Y.shape}")
    Th = np.asarray(Theta_hat(z), dtype=float)
    s = np.asarray(sigma_hat(z), dtype=float)
    sinv = invert_sigma_batch(0.5 * (s + np.swapaxes(s, -1, -2)))
    resid = Y - np.einsum("ni,nij->nj", phi, Th)  # Y' - phi' Theta
    M = Th + np.einsum("ni,nj->nij", np.einsum("nij,nj->ni", sinv, phi), resid)
    phi_pi = fmap(pi(z), z)
    return ValueEstimate.from_contributions(np.einsum("ni,nij,nj->n", phi_pi, M, phi_pi))


def crossfit_records(data: LoggedDataset, fmap: FeatureMap,
                     fit: Callable[[LoggedDataset, int], NuisancePair], seed) -> DrRecords:
    """Two-fold cross-fitting: fit on one half, build records on the other, then swap."""
    perm = np.random.default_rng(seed).permutation(data.n)
    halves = np.array_split(perm, 2)
    theta = np.empty((data.n, fmap.p))
    for i, (fit_rows, eval_rows) in enumerate(((halves[0], halves[1]), (halves[1], halves[0]))):
        nuis = fit(data.subset(fit_rows), i)
        theta[eval_rows] = make_dr_records(data.subset(eval_rows), fmap, nuis).theta
    return DrRecords(theta, data.z, np.arange(data.n))
