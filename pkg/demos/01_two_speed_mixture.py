"""
Fitting a two-speed mixture of Markov chains
============================================

Half of the paths below move five times faster than the other half.  The
one-component fit averages the two speeds; the two-component EM fit
separates them and the log-likelihood ratio is large.
"""

import numpy as np

from mmlrt import CtmcParams, FitOptions, em_fit_two_component, fit_one_component, lrt_statistic, simulate_stats, stream

# Two transient states and one absorbing state, observed on [0, 2].
slow = CtmcParams([0.5, 0.5, 0.0], [1.0, 2.0, 0.0], [[0, 0.7, 0.3], [0.6, 0, 0.4], [0, 0, 0]], 2.0)
fast = slow.with_beta(5 * slow.beta)

data = list(simulate_stats(slow, 500, stream(1, 0))) + list(simulate_stats(fast, 500, stream(1, 1)))

one = fit_one_component(data)
print("one component rates:", np.round(one.params.beta, 3))

two = em_fit_two_component(data, FitOptions(n_restarts=5))
mp = two.params
print("mixing weight:", round(mp.p, 3))
print("component rates:", np.round(mp.comp0[1], 3), np.round(mp.comp1[1], 3))

# The shared transition matrix is the pooled jump frequency either way.
print("gamma equal:", np.array_equal(mp.gamma_shared, one.params.gamma))

# EM never decreases the log-likelihood.
print("trace monotone:", bool(np.all(np.diff(two.trace) >= -1e-9)))

r = lrt_statistic(data, opts=FitOptions(n_restarts=5))
print(f"lambda = {r.lam:.2f}, 2*lambda = {r.doubled:.2f}")
