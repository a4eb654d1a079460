"""Homogeneity tests for mixtures of continuous-time Markov chains.

Modules
-------
ctmc
    Parameters, path simulation, sufficient statistics and path densities.
mixture
    One- and two-component fits and the log-likelihood ratio.
censored_exp
    The censored exponential special case: closed-form covariances, the
    sup statistic and its Gumbel centring.
score_asymptotics
    Monte Carlo diagnostics for the null second moment of the density ratio.
bootstrap
    Parametric bootstrap calibration of the ratio statistic.
"""

from .ctmc import (
    CtmcParams,
    SamplePath,
    StatsBatch,
    SuffStats,
    log_density,
    sample_paths,
    simulate_stats,
    suff_stats,
)
from .mixture import (
    FitOptions,
    FitResult,
    MixtureParams,
    em_fit_two_component,
    fit_one_component,
    lrt_statistic,
)
from .censored_exp import (
    CensExpSample,
    censored_monte_carlo,
    cov_scores,
    gumbel_center,
    lambda_sup,
    rho,
    v_theta,
)
from .score_asymptotics import DivergenceConfig, divergence_report
from .bootstrap import BootstrapConfig, parametric_bootstrap
from .streams import stream

__version__ = "0.1.0"
