"""
Transition density approximations
=================================

The density expansion starts from a Gaussian auxiliary density.  For the OU
process the exact density is Gaussian too, so the error is easy to measure.
For the square-root model we look at normalization and negativity instead.
"""

import math

import numpy as np
from scipy import stats

from jdseries import cli
from jdseries import expansion as ex
from jdseries.generator import make_config
from jdseries.model import make_ou

kappa, sigma, t = 1.0, 0.5, 0.1
da = ex.density_approx(make_config(make_ou(kappa, 0.0, sigma)), (np.array([0.0]), np.array([[sigma**2]])), 6)
y = np.linspace(-1, 1, 401)
var = sigma**2 * (1 - math.exp(-2 * kappa * t)) / (2 * kappa)
exact = stats.norm.pdf(y, 0.0, math.sqrt(var))
for M in range(7):
    p, _ = da.evaluate(y[None, :], [0.0], t, M=M)
    print(f"OU  M={M}  sup error {np.max(np.abs(p - exact)):.2e}")

# square-root variance with jumps, one week ahead
run = cli.cmd_density({"model": {"catalog": "sqr"}, "maturities": [1 / 52], "orders": [0, 3],
                       "mc": {"paths": 100_000, "steps_per_year": 5200, "seed": 3}})
for s in run.summaries:
    print(f"SQR M={s['M']}  normalization {s['normalization']:.4f}  min {s['min_value']:.3g}  "
          f"max |p - histogram| {s['max_abs_mc_diff']:.3g}")
