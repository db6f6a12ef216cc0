"""
Exact moments of polynomial processes
=====================================

CIR maps polynomials of degree k to polynomials of degree k, so its moments
solve a finite linear ODE.  The series truncated at M terms approaches the
matrix exponential as M grows.
"""

import numpy as np

from jdseries import expansion as ex
from jdseries import symexpr as sx
from jdseries.generator import make_config
from jdseries.model import make_cir

cfg = make_config(make_cir(2.0, 0.04, 0.3))
pg = ex.poly_generator_matrix(cfg, 2)
print("basis:", pg.basis)
print(pg.matrix)

v = sx.var(0)
f = sx.mul(v, v)
c = np.zeros(len(pg.basis))
c[pg.index((2,))] = 1.0
exact = ex.poly_moment(pg, c, 0.25, [0.09])
res = ex.expand_regular(cfg, f, 12, max_order=12)
for M in (1, 2, 4, 8, 12):
    s, _ = ex.evaluate_expansion(res, x=[0.09], t=0.25, M=M)
    print(f"M={M:2d}  series {s:.12f}  error {abs(s - exact):.1e}")
