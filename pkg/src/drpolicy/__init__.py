"""Doubly robust off-policy evaluation and learning with continuous actions.

Value model V(a, z) = <theta0(z), phi(a, z)>; the DR coefficient
theta_hat(z) + Sigma_hat(z)^{-1} phi(a, z) (y - <theta_hat(z), phi(a, z)>)
gives unbiased values for any policy when either nuisance is correct.
"""
from .core import (DegenerateLoggingError, FeatureMap, InvalidInputError, LoggedDataset,
                   NuisancePair, Policy, PolicySpace, SingularCovarianceError, custom_map,
                   identity_action_map, one_hot_map, pricing_linear_map, pricing_quadratic_map,
                   pricing_space)
from .estimators import (DrRecords, Objective, ValueEstimate, make_dr_records, policy_value,
                         revenue_objective, theta_dr, theta_dr_batch, value_direct, value_dr,
                         value_dr_revenue, value_ips, value_oracle)
from .nuisance import PolyFeatureConfig, fit_nuisances, lasso_cv_fit, lasso_fit
from .policy_opt import (MuRule, SplitConfig, erm, multitask_lasso_cv, multitask_lasso_fit,
                         regularized_erm, regularized_erm_trace)

__version__ = "0.1.0"
