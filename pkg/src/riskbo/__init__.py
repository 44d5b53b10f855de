"""Value-at-Risk Bayesian optimization with Gaussian processes."""

from riskbo.env import EnvDistribution, make_discrete_grid, make_truncated_gaussian
from riskbo.gp import GaussianProcess, GPHyper, GPPosterior, fit_posterior
from riskbo.bounds import ConfidenceField, beta_practical, beta_theoretical
from riskbo.risk import VaRInterval, pinball, var_discrete, var_interval
from riskbo.bench import make_problem
from riskbo.loop import RunConfig, run_vucb

__version__ = "0.1.0"

__all__ = [
    "ConfidenceField",
    "EnvDistribution",
    "GPHyper",
    "GPPosterior",
    "GaussianProcess",
    "RunConfig",
    "VaRInterval",
    "beta_practical",
    "beta_theoretical",
    "fit_posterior",
    "make_discrete_grid",
    "make_problem",
    "make_truncated_gaussian",
    "pinball",
    "run_vucb",
    "var_discrete",
    "var_interval",
]
