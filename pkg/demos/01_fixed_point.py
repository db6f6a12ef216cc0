"""
Smoothed expansion on its own auxiliary model
=============================================

Under geometric Brownian motion the Black-Scholes smoother already solves the
pricing equation, so every correction term vanishes and the series returns the
smoother for any number of terms.
"""

import math

import numpy as np
from scipy import stats

from jdseries import expansion as ex
from jdseries.generator import make_config
from jdseries.model import bs_call_smoother, make_gbm

r, sigma, K = 0.03, 0.2, 100.0
res = ex.expand_smoothed(make_config(make_gbm(r, sigma)), bs_call_smoother(K, r, sigma), 4)

S = np.linspace(90, 110, 5)
for t in (1 / 52, 1 / 12, 1 / 4):
    u, diag = ex.evaluate_expansion(res, x=np.log(S)[None, :], t=t)
    d1 = (np.log(S / K) + (r + 0.5 * sigma**2) * t) / (sigma * math.sqrt(t))
    # models carry no discounting by default: this is the expected payoff
    bs = S * math.exp(r * t) * stats.norm.cdf(d1) - K * stats.norm.cdf(d1 - sigma * math.sqrt(t))
    print(f"t={t:.4f}  max |u - BS| = {np.max(np.abs(u - bs)):.2e}  largest correction term = "
          f"{np.max(np.abs(diag.terms[1:])):.2e}")
