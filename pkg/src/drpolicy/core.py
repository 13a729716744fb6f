"""Shared domain types: logged data, feature maps, policies and policy spaces."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class InvalidInputError(ValueError):
    """Raised when inputs violate an operation's preconditions."""


class SingularCovarianceError(ArithmeticError):
    """Raised when a (fitted) covariance matrix cannot be inverted."""

    def __init__(self, message: str, row: Optional[int] = None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


class DegenerateLoggingError(ValueError):
    """Raised when the logged actions have (numerically) no variation."""


def _as_2d(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 1-d or 2-d, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class LoggedDataset:
    """n i.i.d. records (y, a, z): outcome, action vector and context vector.

    ``a`` and ``z`` are stored as (n, d_a) and (n, k) matrices; scalar actions
    are 1-vectors.
    """

    y: np.ndarray
    a: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        a = _as_2d(self.a, "a")
        z = _as_2d(self.z, "z")
        if y.ndim != 1:
            raise InvalidInputError(f"y must be a vector, got shape {y.shape}")
        n = y.shape[0]
        if n < 1:
            raise InvalidInputError("dataset must contain at least one record")
        if a.shape[0] != n or z.shape[0] != n:
            raise InvalidInputError(
                f"row counts differ: y={n}, a={a.shape[0]}, z={z.shape[0]}"
            )
        for name, arr in (("y", y), ("a", a), ("z", z)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} contains non-finite entries")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "z", z)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d_a(self) -> int:
        return self.a.shape[1]

    @property
    def k(self) -> int:
        return self.z.shape[1]

    def subset(self, rows) -> "LoggedDataset":
        rows = np.asarray(rows)
        return LoggedDataset(self.y[rows], self.a[rows], self.z[rows])


FEATURE_KINDS = ("pricing-linear", "pricing-quadratic", "identity-action",
                 "discrete-one-hot", "custom")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Known feature map phi(a, z) of the semi-parametric value model.

    ``fn`` is vectorised: it maps an (n, d_a) action matrix and an (n, k)
    context matrix to an (n, p) feature matrix.
    """

    kind: str
    p: int
    d_a: int
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    constant_index: Optional[int] = None  # coordinate of phi that is identically 1

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise InvalidInputError(f"unknown feature map kind {self.kind!r}")

    def __call__(self, a, z) -> np.ndarray:
        a = _as_2d(a, "a")
        z = _as_2d(z, "z")
        if a.shape[1] != self.d_a:
            raise InvalidInputError(
                f"{self.kind} map expects {self.d_a}-dim actions, got {a.shape[1]}"
            )
        if a.shape[0] != z.shape[0]:
            raise InvalidInputError("actions and contexts have different row counts")
        out = np.asarray(self.fn(a, z), dtype=float)
        if out.shape != (a.shape[0], self.p):
            raise InvalidInputError(
                f"feature map returned shape {out.shape}, expected {(a.shape[0], self.p)}"
            )
        return out


def pricing_linear_map() -> FeatureMap:
    """phi(p, z) = (1, p): demand a(z) - b(z) p with theta = (a, -b)."""
    return FeatureMap(
        "pricing-linear", 2, 1,
        lambda a, z: np.column_stack([np.ones(a.shape[0]), a[:, 0]]),
        constant_index=0,
    )


def pricing_quadratic_map() -> FeatureMap:
    """phi(p, z) = (p, p^2): revenue a(z) p - b(z) p^2 with theta = (a, -b)."""
    return FeatureMap(
        "pricing-quadratic", 2, 1,
        lambda a, z: np.column_stack([a[:, 0], a[:, 0] ** 2]),
    )


def identity_action_map(d: int) -> FeatureMap:
    return FeatureMap("identity-action", d, d, lambda a, z: a.copy())


def one_hot_map(n_actions: int) -> FeatureMap:
    """Discrete actions labelled 1..n_actions, encoded as basis vectors e_i."""

    def fn(a, z):
        labels = a[:, 0]
        idx = labels.astype(int)
        if np.any(idx != labels) or np.any(idx < 1) or np.any(idx > n_actions):
            raise InvalidInputError(f"actions must be integer labels in 1..{n_actions}")
        out = np.zeros((a.shape[0], n_actions))
        out[np.arange(a.shape[0]), idx - 1] = 1.0
        return out

    return FeatureMap("discrete-one-hot", n_actions, 1, fn)


def custom_map(fn: Callable[[np.ndarray, np.ndarray], np.ndarray], p: int, d_a: int,
               constant_index: Optional[int] = None) -> FeatureMap:
    """Wrap a per-row function ``fn(a_vec, z_vec) -> p-vector``."""

    def batched(a, z):
        return np.array([np.asarray(fn(a[i], z[i]), dtype=float) for i in range(a.shape[0])])

    return FeatureMap("custom", p, d_a, batched, constant_index=constant_index)


def eval_features(fmap: FeatureMap, a, z) -> np.ndarray:
    """Evaluate phi(a, z) for a single action vector and context vector."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if a.ndim != 1 or z.ndim != 1:
        raise InvalidInputError("eval_features takes a single action and context vector")
    return fmap(a[None, :], z[None, :])[0]


POLICY_FORMS = ("constant", "linear", "summary-linear", "threshold", "sin", "multitask")


@dataclass(frozen=True, eq=False)
class Policy:
    """Deterministic policy z -> action.

    Forms acting on the context summary zbar (mean of the first
    ``n_active`` context coordinates): ``constant`` (gamma),
    ``summary-linear`` (gamma * zbar), ``threshold``
    (base + jump * 1{zbar > cut}) and ``sin`` (sin(zbar)). ``linear`` is
    gamma' z over the full context and ``multitask`` is A z with A of shape
    (d_a, k). Outputs are clipped to [action_low, action_high].
    """

    form: str
    params: np.ndarray
    n_active: int = 1
    action_low: float = -np.inf
    action_high: float = np.inf

    def __post_init__(self):
        if self.form not in POLICY_FORMS:
            raise InvalidInputError(f"unknown policy form {self.form!r}")
        params = np.array(self.params, dtype=float)
        if self.form != "multitask":
            params = np.atleast_1d(params).ravel()
        elif params.ndim != 2:
            raise InvalidInputError("multitask policy needs a (d_a, k) matrix")
        if not np.all(np.isfinite(params)):
            raise InvalidInputError("policy parameters must be finite")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @property
    def d_a(self) -> int:
        return self.params.shape[0] if self.form == "multitask" else 1

    def key(self) -> tuple:
        """Parameter vector as a tuple; used for lexicographic tie-breaking."""
        return tuple(self.params.ravel().tolist())

    def expected_k(self) -> Optional[int]:
        if self.form == "linear":
            return self.params.shape[0]
        if self.form == "multitask":
            return self.params.shape[1]
        return None

    def __call__(self, z) -> np.ndarray:
        """Vectorised application: (n, k) contexts -> (n, d_a) actions."""
        z = _as_2d(z, "z")
        k = self.expected_k()
        if k is not None and z.shape[1] != k:
            raise InvalidInputError(f"{self.form} policy expects {k} context columns, got {z.shape[1]}")
        if self.form in ("constant", "summary-linear", "threshold", "sin"):
            if z.shape[1] < self.n_active:
                raise InvalidInputError(
                    f"context has {z.shape[1]} columns, policy summary needs {self.n_active}"
                )
            zbar = z[:, : self.n_active].mean(axis=1)
        if self.form == "constant":
            out = np.full((z.shape[0], 1), self.params[0])
        elif self.form == "summary-linear":
            out = (self.params[0] * zbar)[:, None]
        elif self.form == "threshold":
            base, jump, cut = self.params
            out = (base + jump * (zbar > cut))[:, None]
        elif self.form == "sin":
            out = np.sin(zbar)[:, None]
        elif self.form == "linear":
            out = (z @ self.params)[:, None]
        else:
            out = z @ self.params.T
        return np.clip(out, self.action_low, self.action_high)

    # the four evaluation policies
    @classmethod
    def constant(cls, gamma: float, **kw) -> "Policy":
        return cls("constant", [gamma], **kw)

    @classmethod
    def linear(cls, gamma, **kw) -> "Policy":
        return cls("linear", gamma, **kw)

    @classmethod
    def summary_linear(cls, gamma: float = 1.0, **kw) -> "Policy":
        return cls("summary-linear", [gamma], **kw)

    @classmethod
    def threshold(cls, base: float = 1.0, jump: float = 1.0, cut: float = 1.5, **kw) -> "Policy":
        return cls("threshold", [base, jump, cut], **kw)

    @classmethod
    def sin(cls, **kw) -> "Policy":
        return cls("sin", [1.0], **kw)

    @classmethod
    def multitask(cls, A, **kw) -> "Policy":
        return cls("multitask", A, **kw)


def apply_policy(pi: Policy, z) -> np.ndarray:
    """Apply a policy to a single context vector, returning a d_a-vector."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.ndim != 1:
        raise InvalidInputError("apply_policy takes a single context vector")
    return pi(z[None, :])[0]


@dataclass(frozen=True, eq=False)
class PolicySpace:
    """A parametric policy family with box-constrained parameters.

    Candidate generation: ``constant`` uses an evenly spaced grid of
    ``grid_size`` points over the box; ``linear`` draws ``n_random`` uniform
    samples from the box. Gaussian perturbations around anchor policies are
    added by :meth:`perturb`.
    """

    family: str
    low: np.ndarray
    high: np.ndarray
    grid_size: int = 200
    n_random: int = 500
    n_perturb: int = 100
    perturb_scale: float = 0.1
    n_active: int = 1
    action_low: float = -np.inf
    action_high: float = np.inf

    def __post_init__(self):
        if self.family not in ("constant", "linear", "multitask"):
            raise InvalidInputError(f"unknown policy family {self.family!r}")
        low = np.atleast_1d(np.asarray(self.low, dtype=float))
        high = np.atleast_1d(np.asarray(self.high, dtype=float))
        if low.shape != high.shape or np.any(low > high):
            raise InvalidInputError("box needs matching low <= high bounds")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def dim(self) -> int:
        return self.low.shape[0]

    def clip(self, params) -> np.ndarray:
        return np.clip(np.asarray(params, dtype=float), self.low, self.high)

    def make(self, params) -> Policy:
        params = self.clip(params)
        form = "constant" if self.family == "constant" else self.family
        if form == "multitask":
            raise InvalidInputError("multitask policies are produced by the lasso learner")
        return Policy(form, params, n_active=self.n_active,
                      action_low=self.action_low, action_high=self.action_high)

    def candidates(self, seed) -> np.ndarray:
        """Deterministic base candidate set, shape (n_candidates, dim)."""
        if self.family == "constant":
            return np.linspace(self.low[0], self.high[0], self.grid_size)[:, None]
        if self.family == "linear":
            rng = np.random.default_rng(seed)
            return rng.uniform(self.low, self.high, size=(self.n_random, self.dim))
        raise InvalidInputError("multitask spaces have no enumerable candidate set")

    def perturb(self, anchor, seed) -> np.ndarray:
        """``n_perturb`` Gaussian perturbations of ``anchor``, clipped to the box."""
        rng = np.random.default_rng(seed)
        scale = self.perturb_scale * (self.high - self.low)
        draws = np.asarray(anchor, dtype=float) + scale * rng.standard_normal((self.n_perturb, self.dim))
        return self.clip(draws)


PRICE_BOX = (0.1, 5.0)
LINEAR_GAMMA_BOX = (-5.0, 5.0)


def pricing_space(family: str, k: int = 1, n_active: int = 1, **kw) -> PolicySpace:
    """Pricing policy space with prices restricted to PRICE_BOX."""
    if family == "constant":
        low, high = [PRICE_BOX[0]], [PRICE_BOX[1]]
    elif family == "linear":
        low, high = [LINEAR_GAMMA_BOX[0]] * k, [LINEAR_GAMMA_BOX[1]] * k
    else:
        raise InvalidInputError(f"no pricing space for family {family!r}")
    return PolicySpace(family, low, high, n_active=n_active,
                       action_low=PRICE_BOX[0], action_high=PRICE_BOX[1], **kw)


@dataclass(frozen=True, eq=False)
class NuisancePair:
    """Fitted first stages: theta_hat(Z) -> (n, p) and sigma_hat(Z) -> (n, p, p).

    ``stats`` optionally carries the pricing sufficient statistics the matrix
    form was expanded from.
    """

    theta_hat: Callable[[np.ndarray], np.ndarray]
    sigma_hat: Callable[[np.ndarray], np.ndarray]
    stats: Optional[object] = None
    meta: dict = field(default_factory=dict)

    def theta(self, z) -> np.ndarray:
        return np.asarray(self.theta_hat(_as_2d(z, "z")), dtype=float)

    def sigma(self, z) -> np.ndarray:
        s = np.asarray(self.sigma_hat(_as_2d(z, "z")), dtype=float)
        return 0.5 * (s + np.swapaxes(s, -1, -2))
