"""
Divergence of the null second moment
====================================

Speeding up every rate of a chain by a factor c makes the density ratio
heavy tailed under the null.  Its second moment grows with c, which is
what forces the ratio statistic to be unbounded.  Two Monte Carlo
estimators and a closed-form lower bound track the growth.
"""

from mmlrt import CtmcParams, DivergenceConfig, divergence_report

base = CtmcParams([1.0, 0.0], [1.0, 0.0], [[0, 1.0], [0, 0]], 1.0)
rep = divergence_report(DivergenceConfig(base, (2.0, 5.0, 10.0, 20.0), 50_000, seed=0))
print(rep.to_text())

# The exact moment for this chain: stay + (1 - stay) c^2 / (2c - 1).
for c in (2.0, 5.0, 10.0, 20.0):
    stay = 2.718281828459045 ** (-(2 * c - 1))
    print(c, stay + (1 - stay) * c * c / (2 * c - 1))
