"""Parametric bootstrap of the composite one-vs-two component LRT.

Replicate ``b`` simulates ``n`` paths from the fitted null with the stream
``(master_seed, b, 0)`` and jitters its EM restarts with
``(master_seed, b, 1)``.  Replicates are fitted in fixed blocks of
``BLOCK`` so the arithmetic, and therefore the report, does not depend on
how many worker processes share the blocks.
"""

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc

from .ctmc import CtmcParams, simulate_stats
from .mixture import FitOptions, lrt_many
from .streams import stream

BLOCK = 32
QUANTILES = (0.5, 0.9, 0.95, 0.99)


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 10_000
    n: int = 100
    master_seed: int = 0
    fit_opts: FitOptions = field(default_factory=FitOptions)
    workers: int = 1
    chi2_df: int = 1
    double_lambda_for_chi2: bool = True
    bins: int = 50

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.chi2_df < 1:
            raise ValueError("chi2_df must be at least 1")


@dataclass
class BootstrapReport:
    lambda_observed: float
    lambdas: np.ndarray
    p_boot: float
    p_boot_raw: float
    p_chi2: float
    p_chi2_lambda: float
    p_chi2_doubled: float
    chi2_df: int
    histogram: tuple
    quantiles: dict
    failures: int
    failed: list

    def to_dict(self):
        edges, counts = self.histogram
        return {
            "lambda_observed": float(self.lambda_observed),
            "lambdas": [float(v) for v in self.lambdas],
            "p_boot": self.p_boot,
            "p_boot_raw": self.p_boot_raw,
            "p_chi2": self.p_chi2,
            "p_chi2_lambda": self.p_chi2_lambda,
            "p_chi2_doubled": self.p_chi2_doubled,
            "chi2_df": self.chi2_df,
            "histogram": {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]},
            "quantiles": {str(q): float(v) for q, v in self.quantiles.items()},
            "failures": self.failures,
            "failed_replicates": list(self.failed),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_histogram_csv(self, path):
        edges, counts = self.histogram
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["bin_left", "bin_right", "count"])
            for a, b, c in zip(edges[:-1], edges[1:], counts):
                wr.writerow([f"{a:.17g}", f"{b:.17g}", int(c)])


def chi2_reference_pvalue(lam, df, doubled=True):
    """Upper tail of chi-square(``df``) at ``2 lam`` (or ``lam``)."""
    if df < 1:
        raise ValueError("df must be at least 1")
    x = 2.0 * lam if doubled else lam
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


def bootstrap_pvalue(lambda_observed, lambdas):
    """Add-one p-value; ties count as exceeding."""
    lambdas = np.asarray(lambdas)
    return (1.0 + np.count_nonzero(lambdas >= lambda_observed)) / (lambdas.size + 1.0)


def _run_block(args):
    null_fit, n, master_seed, opts, start, stop = args
    batches = [simulate_stats(null_fit, n, stream(master_seed, b, 0)) for b in range(start, stop)]
    rngs = [stream(master_seed, b, 1) for b in range(start, stop)]
    res = lrt_many(batches, "composite", None, opts, rngs)
    return [(r.lam, r.converged) for r in res]


def replicate_lambdas(null_fit, config):
    """Composite LRT statistic of each replicate, and a convergence mask."""
    jobs = [(null_fit, config.n, config.master_seed, config.fit_opts, a, min(a + BLOCK, config.B))
            for a in range(0, config.B, BLOCK)]
    if config.workers == 1 or len(jobs) == 1:
        parts = [_run_block(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            parts = list(ex.map(_run_block, jobs))
    flat = [x for part in parts for x in part]
    return np.array([x[0] for x in flat]), np.array([x[1] for x in flat], dtype=bool)


def parametric_bootstrap(null_fit, lambda_observed, config):
    """Calibrate ``lambda_observed`` against replicates simulated from ``null_fit``.

    Replicates whose EM stopped at ``max_iters`` keep the best value reached
    and are listed in ``failed``.
    """
    if not isinstance(null_fit, CtmcParams):
        raise TypeError("null_fit must be CtmcParams")
    if lambda_observed < 0:
        raise ValueError("lambda_observed must be nonnegative")
    lambdas, ok = replicate_lambdas(null_fit, config)
    return summarize(lambda_observed, lambdas, ok, config)


def summarize(lambda_observed, lambdas, ok, config):
    lambdas = np.asarray(lambdas, dtype=float)
    counts, edges = np.histogram(lambdas, bins=config.bins)
    failed = np.flatnonzero(~np.asarray(ok)).tolist()
    return BootstrapReport(
        lambda_observed=float(lambda_observed),
        lambdas=lambdas,
        p_boot=float(bootstrap_pvalue(lambda_observed, lambdas)),
        p_boot_raw=float(np.mean(lambdas >= lambda_observed)),
        p_chi2=chi2_reference_pvalue(lambda_observed, config.chi2_df, config.double_lambda_for_chi2),
        p_chi2_lambda=chi2_reference_pvalue(lambda_observed, config.chi2_df, False),
        p_chi2_doubled=chi2_reference_pvalue(lambda_observed, config.chi2_df, True),
        chi2_df=config.chi2_df,
        histogram=(edges, counts),
        quantiles={q: float(np.quantile(lambdas, q)) for q in QUANTILES},
        failures=len(failed),
        failed=failed,
    )


def default_workers():
    env = os.environ.get("MMLRT_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
