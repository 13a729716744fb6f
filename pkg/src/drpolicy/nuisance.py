"""First-stage regressions: polynomial features, CV lasso, theta_hat / Sigma_hat fits."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Optional

import numpy as np

from ._kernels import lasso_cd
from .core import (DegenerateLoggingError, FeatureMap, InvalidInputError, LoggedDataset,
                   NuisancePair)

LASSO_TOL = 1e-7
LASSO_MAX_ITER = 10_000
N_LAMBDAS = 50
LAMBDA_RATIO = 1e-3


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PolyFeatureConfig:
    degree: int = 3
    interactions: bool = True
    include_intercept: bool = False

    def n_features(self, k: int) -> int:
        return (int(self.include_intercept) + k * self.degree
                + (k * (k - 1) // 2 if self.interactions else 0))


def poly_design(z, cfg: PolyFeatureConfig = PolyFeatureConfig()) -> np.ndarray:
    """Row-wise polynomial expansion of an (n, k) context matrix.

    Column order: [1], z, z**2, ..., z**degree, then z_i z_j for i < j.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if cfg.degree < 1 or z.shape[1] < 1:
        raise InvalidInputError("need degree >= 1 and at least one context column")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("contexts contain non-finite entries")
    cols = [np.ones((z.shape[0], 1))] if cfg.include_intercept else []
    cols += [z ** d for d in range(1, cfg.degree + 1)]
    if cfg.interactions and z.shape[1] > 1:
        cols += [np.column_stack([z[:, i] * z[:, j]
                                  for i, j in combinations(range(z.shape[1]), 2)])]
    return np.hstack(cols)


def expand_polynomial_features(z, cfg: PolyFeatureConfig = PolyFeatureConfig()) -> np.ndarray:
    """Polynomial expansion of a single context vector."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return poly_design(z[None, :], cfg)[0]


@dataclass
class LassoFit:
    """Lasso solution mapped back to the original column scale.

    ``coef`` has one entry per input column (zeros for dropped columns).
    ``mean``/``scale`` are the standardisation used for the kept columns.
    """

    coef: np.ndarray
    intercept: float
    lam: float
    mean: np.ndarray
    scale: np.ndarray
    keep: np.ndarray
    fit_intercept: bool = True
    n_iter: int = 0
    converged: bool = True
    meta: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coef + self.intercept

    @property
    def dropped(self) -> np.ndarray:
        return np.flatnonzero(~self.keep)

    @property
    def std_coef(self) -> np.ndarray:
        """Coefficients on the standardised kept columns."""
        return self.coef[self.keep] * self.scale


class _Standardized:
    """Standardised design and its Gram quantities."""

    def __init__(self, X: np.ndarray, y: np.ndarray, fit_intercept: bool):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise InvalidInputError(f"bad lasso shapes X={X.shape}, y={y.shape}")
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise InvalidInputError("lasso needs n >= 1 and m >= 1")
        n = X.shape[0]
        if fit_intercept:
            mean = X.mean(axis=0)
            scale = X.std(axis=0)
            keep = scale > 1e-12 * (1.0 + np.abs(mean))
            self.y_mean = y.mean()
        else:
            mean = np.zeros(X.shape[1])
            scale = np.sqrt(np.mean(X ** 2, axis=0))
            keep = scale > 0.0
            self.y_mean = 0.0
        self.n = n
        self.keep = keep
        self.mean = mean[keep]
        self.scale = scale[keep]
        self.fit_intercept = fit_intercept
        Xs = (X[:, keep] - self.mean) / self.scale
        yc = y - self.y_mean
        self.G = Xs.T @ Xs / n
        self.c = Xs.T @ yc / n
        self.yy = yc @ yc / n
        self.m_all = X.shape[1]

    @property
    def lambda_max(self) -> float:
        return float(np.max(np.abs(self.c))) if self.c.size else 0.0

    def objective(self, beta: np.ndarray, lam: float) -> float:
        return float(0.5 * self.yy - self.c @ beta + 0.5 * beta @ self.G @ beta
                     + lam * np.abs(beta).sum())

    def unscale(self, beta: np.ndarray, lam: float, n_iter: int, converged: bool) -> LassoFit:
        coef = np.zeros(self.m_all)
        coef[self.keep] = beta / self.scale
        intercept = float(self.y_mean - self.mean @ coef[self.keep]) if self.fit_intercept else 0.0
        return LassoFit(coef, intercept, float(lam), self.mean, self.scale, self.keep,
                        self.fit_intercept, n_iter, converged)


def _lasso_obj(G, c, b, lam):
    return 0.5 * b @ G @ b - c @ b + lam * np.abs(b).sum()


def _polish(G: np.ndarray, c: np.ndarray, beta: np.ndarray, lam: float, tol: float,
            max_steps: Optional[int] = None) -> bool:
    """Feature-sign active-set search started from the coordinate-descent iterate.

    Each step solves the equality-constrained problem on the current support
    and signs, line-searches over the sign changes along the way, and adds the
    worst KKT violator once the support is stable. The objective never
    increases; ``beta`` is overwritten only when the KKT conditions hold.
    """
    m = c.shape[0]
    b = beta.copy()
    f = _lasso_obj(G, c, b, lam)
    for _ in range(max_steps or 2 * m + 10):
        grad = c - G @ b
        active = b != 0.0
        viol = np.where(active, 0.0, np.abs(grad) - lam)
        j = int(np.argmax(viol))
        inner_ok = not active.any() or np.all(np.abs(grad[active] - lam * np.sign(b[active])) <= tol)
        if inner_ok and viol[j] <= tol:
            beta[:] = b
            return True
        signs = np.sign(b)
        if inner_ok:
            active[j] = True
            signs[j] = np.sign(grad[j])
        idx = np.flatnonzero(active)
        try:
            x = np.linalg.solve(G[np.ix_(idx, idx)], c[idx] - lam * signs[idx])
        except np.linalg.LinAlgError:
            return False
        target = np.zeros(m)
        target[idx] = x
        # candidate points: the target and every zero crossing on the way there
        pts = [target]
        d = target - b
        for i in idx:
            if b[i] != 0.0 and np.sign(target[i]) != np.sign(b[i]):
                t = b[i] / (b[i] - target[i])
                q = b + t * d
                q[i] = 0.0
                pts.append(q)
        vals = [_lasso_obj(G, c, q, lam) for q in pts]
        k = int(np.argmin(vals))
        if vals[k] > f + 1e-15 * max(1.0, abs(f)):
            return False
        b, f = pts[k], vals[k]
        b[np.abs(b) < 1e-300] = 0.0
    return False


def _refine(G, c, beta, lam, tol) -> None:
    """Exact re-solve on a converged support (kept only if signs and KKT survive)."""
    idx = np.flatnonzero(beta)
    if idx.size == 0:
        return
    signs = np.sign(beta[idx])
    try:
        x = np.linalg.solve(G[np.ix_(idx, idx)], c[idx] - lam * signs)
    except np.linalg.LinAlgError:
        return
    if not np.all(np.sign(x) == signs):
        return
    trial = np.zeros_like(beta)
    trial[idx] = x
    grad = c - G @ trial
    inactive = np.ones(beta.shape[0], dtype=bool)
    inactive[idx] = False
    if np.all(np.abs(grad[inactive]) <= lam + tol):
        beta[:] = trial


def _cd_solve(G, c, beta, lam, tol, max_iter, chunk: int = 25):
    """Coordinate descent with a support-polishing step every ``chunk`` sweeps."""
    done = 0
    while done < max_iter:
        sweeps, converged = lasso_cd(G, c, beta, lam, tol, min(chunk, max_iter - done))
        done += sweeps
        if converged or _polish(G, c, beta, lam, tol):
            _refine(G, c, beta, lam, tol)
            return done, True
    return done, False


def lambda_max(X, y, fit_intercept: bool = True) -> float:
    """Smallest penalty at which every (standardised) coefficient is zero."""
    return _Standardized(X, y, fit_intercept).lambda_max


def lasso_fit(X, y, lam: float, tol: float = LASSO_TOL, max_iter: int = LASSO_MAX_ITER,
              fit_intercept: bool = True, trace: bool = False) -> LassoFit:
    """Minimise (1/2n)||y - X b - b0||^2 + lam ||b||_1 by cyclic coordinate descent.

    Columns are standardised internally (unit variance, or unit RMS without an
    intercept); zero-variance columns are dropped. Non-convergence is reported
    through ``converged=False`` plus a :class:`ConvergenceWarning`.
    With ``trace=True`` the objective after every sweep is stored in
    ``meta["objective"]``.
    """
    if lam < 0:
        raise InvalidInputError("lambda must be non-negative")
    st = _Standardized(X, y, fit_intercept)
    beta = np.zeros(st.c.shape[0])
    if trace:
        history = [st.objective(beta, lam)]
        n_iter, converged = 0, False
        while n_iter < max_iter and not converged:
            _, converged = lasso_cd(st.G, st.c, beta, lam, tol, 1)
            n_iter += 1
            if not converged and n_iter % 25 == 0:
                converged = _polish(st.G, st.c, beta, lam, tol)
            history.append(st.objective(beta, lam))
    else:
        n_iter, converged = _cd_solve(st.G, st.c, beta, lam, tol, max_iter)
    if not converged:
        warnings.warn(f"lasso did not converge in {max_iter} sweeps (lambda={lam:g})",
                      ConvergenceWarning, stacklevel=2)
    fit = st.unscale(beta, lam, n_iter, converged)
    if trace:
        fit.meta["objective"] = history
    return fit


def default_lambda_grid(X, y, fit_intercept: bool = True, n_lambdas: int = N_LAMBDAS,
                        ratio: float = LAMBDA_RATIO) -> np.ndarray:
    lmax = lambda_max(X, y, fit_intercept)
    if lmax <= 0.0:
        return np.array([0.0])
    return np.geomspace(lmax, ratio * lmax, n_lambdas)


def fold_ids(n: int, folds: int, seed) -> np.ndarray:
    """Deterministic balanced fold assignment."""
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.empty(n, dtype=int)
    for f, chunk in enumerate(np.array_split(perm, folds)):
        ids[chunk] = f
    return ids


def lasso_cv_fit(X, y, folds: int = 5, lambda_grid=None, seed=0,
                 fit_intercept: bool = True, tol: float = LASSO_TOL,
                 max_iter: int = LASSO_MAX_ITER) -> LassoFit:
    """K-fold cross-validated lasso.

    Picks the penalty with the smallest mean out-of-fold squared error
    (exact ties go to the larger penalty) and refits on all rows.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if folds < 2:
        raise InvalidInputError("need at least two folds")
    n = X.shape[0]
    if n < folds:
        raise InvalidInputError(f"n={n} is smaller than the number of folds ({folds})")
    grid = (default_lambda_grid(X, y, fit_intercept) if lambda_grid is None
            else np.sort(np.atleast_1d(np.asarray(lambda_grid, dtype=float)))[::-1])
    if grid.size == 0:
        raise InvalidInputError("lambda grid is empty")
    if grid.size == 1:
        fit = lasso_fit(X, y, grid[0], tol, max_iter, fit_intercept)
        fit.meta["cv_errors"] = None
        return fit
    ids = fold_ids(n, folds, seed)
    errors = np.zeros((folds, grid.size))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for f in range(folds):
            train, test = ids != f, ids == f
            st = _Standardized(X[train], y[train], fit_intercept)
            Xte = (X[test][:, st.keep] - st.mean) / st.scale
            yte = y[test] - st.y_mean
            beta = np.zeros(st.c.shape[0])
            for i, lam in enumerate(grid):
                _cd_solve(st.G, st.c, beta, lam, tol, max_iter)
                errors[f, i] = np.mean((yte - Xte @ beta) ** 2)
    mean_err = errors.mean(axis=0)
    best = int(np.argmin(mean_err))  # grid is descending: first minimum = largest lambda
    fit = lasso_fit(X, y, grid[best], tol, max_iter, fit_intercept)
    fit.meta["cv_errors"] = mean_err
    fit.meta["lambda_grid"] = grid
    return fit


# ---------------------------------------------------------------------------
# nuisance fits


@dataclass
class ThetaHat:
    """theta_hat(z) = B q(z) + b0, one row of B per feature coordinate."""

    coef: np.ndarray  # (p, 1 + m): column 0 multiplies 1, the rest q(z)
    poly: PolyFeatureConfig
    meta: dict = field(default_factory=dict)

    def __call__(self, z) -> np.ndarray:
        q = poly_design(z, self.poly)
        return self.coef[:, 0][None, :] + q @ self.coef[:, 1:].T


def _theta_design(phi: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Columns phi_j * [1, q(z)] for j = 1..p (blocks in coordinate order)."""
    q1 = np.hstack([np.ones((q.shape[0], 1)), q])
    return np.hstack([phi[:, [j]] * q1 for j in range(phi.shape[1])])


def fit_theta_hat(data: LoggedDataset, fmap: FeatureMap,
                  cfg: PolyFeatureConfig = PolyFeatureConfig(), seed=0,
                  folds: int = 5) -> ThetaHat:
    """Square-loss fit of theta(z) with each coordinate linear in q(z).

    Regresses y on the interactions phi_j(a, z) * [1, q(z)] with a
    cross-validated lasso. When some phi_j is constant in the data, its
    constant column becomes the (unpenalised) intercept; otherwise the
    regression has no intercept.
    """
    phi = fmap(data.a, data.z)
    q = poly_design(data.z, cfg)
    design = _theta_design(phi, q)
    const = [j for j in range(fmap.p) if np.ptp(phi[:, j]) == 0.0 and phi[0, j] != 0.0]
    fit_intercept = bool(const)
    fit = lasso_cv_fit(design, data.y, folds=min(folds, data.n), seed=seed,
                       fit_intercept=fit_intercept)
    coef = fit.coef.reshape(fmap.p, 1 + q.shape[1]).copy()
    if fit_intercept:
        j0 = const[0]
        # merge the constant block column (dropped as zero-variance) into the intercept
        coef[j0, 0] = fit.intercept / phi[0, j0]
    dropped = [int(i) for i in fit.dropped if not (fit_intercept and i == const[0] * (1 + q.shape[1]))]
    return ThetaHat(coef, cfg, {"lambda": fit.lam, "dropped_columns": dropped,
                                "converged": fit.converged})


@dataclass
class SigmaHat:
    """Entrywise regression of phi_i phi_j on q(z); returns symmetric matrices."""

    fits: dict  # (i, j) with i <= j -> LassoFit on q(z)
    p: int
    poly: PolyFeatureConfig

    def __call__(self, z) -> np.ndarray:
        q = poly_design(z, self.poly)
        out = np.empty((q.shape[0], self.p, self.p))
        for (i, j), fit in self.fits.items():
            out[:, i, j] = out[:, j, i] = fit.predict(q)
        return out


def fit_sigma_hat(data: LoggedDataset, fmap: FeatureMap,
                  cfg: PolyFeatureConfig = PolyFeatureConfig(), seed=0,
                  folds: int = 5) -> SigmaHat:
    """Fit E[phi phi' | z] entry by entry (i <= j) with independent CV lassos."""
    phi = fmap(data.a, data.z)
    q = poly_design(data.z, cfg)
    fits = {}
    for i in range(fmap.p):
        for j in range(i, fmap.p):
            fits[(i, j)] = lasso_cv_fit(q, phi[:, i] * phi[:, j], folds=min(folds, data.n),
                                        seed=seed)
    return SigmaHat(fits, fmap.p, cfg)


def fit_sigma_iv_hat(data: LoggedDataset, w, fmap: FeatureMap,
                     cfg: PolyFeatureConfig = PolyFeatureConfig(), seed=0,
                     folds: int = 5) -> Callable[[np.ndarray], np.ndarray]:
    """Fit E[w phi' | z] entry by entry; the result is not symmetric in general."""
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    phi = fmap(data.a, data.z)
    q = poly_design(data.z, cfg)
    fits = {(i, j): lasso_cv_fit(q, w[:, i] * phi[:, j], folds=min(folds, data.n), seed=seed)
            for i in range(w.shape[1]) for j in range(fmap.p)}
    r, p = w.shape[1], fmap.p

    def sigma_iv(z):
        qz = poly_design(z, cfg)
        out = np.empty((qz.shape[0], r, p))
        for (i, j), fit in fits.items():
            out[:, i, j] = fit.predict(qz)
        return out

    return sigma_iv


@dataclass
class PricingStats:
    """Homoskedastic linear-demand nuisances: mean price g(z) and variance sigma2."""

    g_hat: Callable[[np.ndarray], np.ndarray]
    sigma2: float

    def __iter__(self):
        return iter((self.g_hat, self.sigma2))

    def sigma_matrix(self, z) -> np.ndarray:
        """Expand to E[phi phi' | z] = [[1, g], [g, sigma2 + g^2]] for phi = (1, p)."""
        g = np.asarray(self.g_hat(z), dtype=float)
        out = np.empty((g.shape[0], 2, 2))
        out[:, 0, 0] = 1.0
        out[:, 0, 1] = out[:, 1, 0] = g
        out[:, 1, 1] = self.sigma2 + g ** 2
        return out


def _fit_mean_price(data: LoggedDataset, cfg, seed, folds):
    if data.d_a != 1:
        raise InvalidInputError("pricing nuisances need a scalar action")
    q = poly_design(data.z, cfg)
    price = data.a[:, 0]
    fit = lasso_cv_fit(q, price, folds=min(folds, data.n), seed=seed)
    resid = price - fit.predict(q)

    def g_hat(z):
        return fit.predict(poly_design(z, cfg))

    return g_hat, resid


def fit_pricing_nuisances(data: LoggedDataset, cfg: PolyFeatureConfig = PolyFeatureConfig(),
                          seed=0, folds: int = 5) -> PricingStats:
    """CV lasso of the price on q(z) plus the residual second moment."""
    g_hat, resid = _fit_mean_price(data, cfg, seed, folds)
    sigma2 = float(np.mean(resid ** 2))
    if sigma2 <= 1e-10:
        raise DegenerateLoggingError(f"logged prices have no residual variance ({sigma2:g})")
    return PricingStats(g_hat, sigma2)


def raw_moments_from_central(mu1, muc2: float, muc3: float, muc4: float):
    """Raw moments E[p^k | z], k = 2, 3, 4, from the mean and central moments."""
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = muc2 + mu1 ** 2
    mu3 = muc3 + 3.0 * mu2 * mu1 - 2.0 * mu1 ** 3
    mu4 = muc4 + 4.0 * mu3 * mu1 - 6.0 * mu2 * mu1 ** 2 + 3.0 * mu1 ** 4
    return mu2, mu3, mu4


@dataclass
class QuadraticMoments:
    """Mean price mu1(z) and context-free central moments of the price."""

    mu1_hat: Callable[[np.ndarray], np.ndarray]
    muc2: float
    muc3: float
    muc4: float

    def __iter__(self):
        return iter((self.mu1_hat, self.muc2, self.muc3, self.muc4))

    def raw_moments(self, z):
        mu1 = np.asarray(self.mu1_hat(z), dtype=float)
        return (mu1,) + raw_moments_from_central(mu1, self.muc2, self.muc3, self.muc4)

    def sigma_matrix(self, z) -> np.ndarray:
        """Expand to E[phi phi' | z] = [[mu2, mu3], [mu3, mu4]] for phi = (p, p^2)."""
        _, mu2, mu3, mu4 = self.raw_moments(z)
        out = np.empty((mu2.shape[0], 2, 2))
        out[:, 0, 0] = mu2
        out[:, 0, 1] = out[:, 1, 0] = mu3
        out[:, 1, 1] = mu4
        return out


def fit_quadratic_moments(data: LoggedDataset, cfg: PolyFeatureConfig = PolyFeatureConfig(),
                          seed=0, folds: int = 5) -> QuadraticMoments:
    mu1_hat, resid = _fit_mean_price(data, cfg, seed, folds)
    muc2 = float(np.mean(resid ** 2))
    if muc2 <= 1e-10:
        raise DegenerateLoggingError(f"logged prices have no residual variance ({muc2:g})")
    return QuadraticMoments(mu1_hat, muc2, float(np.mean(resid ** 3)), float(np.mean(resid ** 4)))


def fit_nuisances(data: LoggedDataset, fmap: FeatureMap,
                  cfg: PolyFeatureConfig = PolyFeatureConfig(), seed=0,
                  shortcut: Optional[bool] = None) -> NuisancePair:
    """Fit theta_hat and Sigma_hat for ``fmap``.

    For the two pricing maps the covariance is built from the homoskedastic
    sufficient statistics unless ``shortcut=False``.
    """
    ss = np.random.SeedSequence(seed).spawn(2)
    theta_seed, sigma_seed = (int(s.generate_state(1)[0]) for s in ss)
    theta_hat = fit_theta_hat(data, fmap, cfg, theta_seed)
    use_shortcut = fmap.kind in ("pricing-linear", "pricing-quadratic") if shortcut is None else shortcut
    if use_shortcut and fmap.kind == "pricing-linear":
        stats = fit_pricing_nuisances(data, cfg, sigma_seed)
        return NuisancePair(theta_hat, stats.sigma_matrix, stats, dict(theta_hat.meta))
    if use_shortcut and fmap.kind == "pricing-quadratic":
        stats = fit_quadratic_moments(data, cfg, sigma_seed)
        return NuisancePair(theta_hat, stats.sigma_matrix, stats, dict(theta_hat.meta))
    return NuisancePair(theta_hat, fit_sigma_hat(data, fmap, cfg, sigma_seed), None,
                        dict(theta_hat.meta))
