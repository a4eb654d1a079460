"""
The censored exponential case
=============================

With two states, one of them absorbing, the absorption time observed on
[0, T] is a censored exponential.  The standardised score process then has
closed-form covariances, and the sup of the profile ratio statistic has a
Gumbel limit after centring by log log n, reached very slowly.
"""

import numpy as np

from mmlrt import censored_monte_carlo, cov_scores, gumbel_center, lambda_sup, rho, v_theta
from mmlrt.censored_exp import GUMBEL_MEDIAN, local_stationarity_estimate, long_range_ratio, profile_lambda
from mmlrt.censored_exp import sample_censored
from mmlrt.streams import stream

# %% Correlation of scores: rho * sqrt(v v) reproduces the covariance
s, t, T = 0.3, 1.1, 1.0
th1, th2 = np.exp(s) + 0.5, np.exp(t) + 0.5
print("cov:", cov_scores(th1, th2, T), " rho*sqrt(vv):", rho(s, t, T) * np.sqrt(v_theta(th1, T) * v_theta(th2, T)))

# Near the diagonal 1 - rho behaves like delta^2 / 8; far away rho decays like 2 exp(-delta/2).
print("V(0), uncensored:", local_stationarity_estimate(0.0)[1])
print("V(0), T = 1:", local_stationarity_estimate(0.0, T=1.0)[1])
print("rho * exp(delta/2) at delta = 20:", long_range_ratio(20.0))

# %% Profile over theta for one sample
x = sample_censored(1.0, 1.0, 200, stream(5))
for th in (0.2, 0.5, 2.0, 10.0, 100.0):
    lam, p = profile_lambda(x, th)
    print(f"theta {th:7.1f}: lambda {lam:.4f}  p {p:.4f}")
res = lambda_sup(x)
print(f"sup at theta {res.theta_hat:.3g}: lambda {res.lam:.4f}, G {gumbel_center(res.lam, x.n):.4f}")

# %% A small Monte Carlo of the centred statistic
for n in (100, 1000):
    mc = censored_monte_carlo(n, 200, seed=6)
    print(f"n={n}: median G {np.median(mc.centered):.3f} (Gumbel {GUMBEL_MEDIAN:.3f}), KS {mc.ks_gumbel():.3f}")
