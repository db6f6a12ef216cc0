"""
When more terms hurt
====================

Smoothed expansions of a call payoff have a finite radius of convergence.  For
the GARCH-variance model at a three-month horizon the term magnitudes start
growing well before M=8, and the diagnostic flags where that happens.
"""

import math

import numpy as np

from jdseries import expansion as ex
from jdseries.generator import make_config
from jdseries.model import bs_call_smoother, build_catalog_model

model = build_catalog_model("garch")
res = ex.expand_smoothed(make_config(model, n=4), bs_call_smoother(100.0, 0.03, math.sqrt(0.0416)), 8)
S = np.array([90.0, 100.0, 110.0])
X = np.vstack([np.log(S), np.full(3, 0.0416)])
u, diag = ex.evaluate_expansion(res, x=X, t=0.25)

np.set_printoptions(precision=3, linewidth=120)
print("|tau_m| by column (S = 90, 100, 110):")
print(np.abs(diag.terms))
print("onset index:", diag.onset)
print("partial sums at S=100:", diag.partial_sums[:, 1])
if diag.diverging:
    print(ex.CAUTION)
