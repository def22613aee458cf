"""Correlated mixed probit regression.

Binary outcomes driven by a latent Gaussian with fixed effects and
group random effects whose precision matrix encodes a dependence
network.  Fitting is an EM whose E-step approximates the truncated
multivariate normal moments with per-site recursions, with penalised
(graphical lasso) and Monte Carlo EM variants, Louis-identity standard
errors, and a simulation/evaluation harness.
"""

from ._backend import backend_name
from .bench import (SimDesign, bias_rmse, classification_table, gen_dataset,
                    gen_precision, network_roc, roc_curve)
from .em import (EMConfig, FitResult, PathResult, fit_ml, fit_penalized,
                 fit_penalized_single, fit_probit, predict, q_function)
from .estep import (EStepState, estep_region, loo_conditional, mean_field_sweep,
                    u_moments_exact, u_moments_groupavg)
from .louis import (lambda_matrices, observed_information, quadform_expectations,
                    standard_errors)
from .mcem import GibbsConfig, gibbs_latent, mc_moments, mcem_fit
from .model import (Dataset, ModelParams, RegionBlock, region_covariance,
                    validate_dataset)
from .mstep import glasso, update_beta, update_phi_diagonal, update_phi_ml
from .truncnorm import TruncMoments, mills_terms, trunc_moments, truncation_bounds

__version__ = "0.1.0"
