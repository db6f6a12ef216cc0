"""Power-series expansions of E_t f and their evaluation.

Coefficients are built symbolically once and then evaluated in batch over many
(x, t) points.  The polynomial-process matrix exponential provides an exact
oracle for models whose generator preserves polynomial degree.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import stats

from . import symexpr as sx
from .generator import (BudgetExceeded, GeneratorConfig, apply_AD_minus_r_dt, apply_B, apply_B_minus_dt)
from .model import Smoother, gaussian_density_smoother
from .quadrature import convolution_rule

DEFAULT_ORDER = 3
MAX_ORDER = 8
EVAL_CHUNK = 400_000  # points x nested quadrature nodes per evaluation chunk

CAUTION = ("caution: successive expansion terms grow in magnitude; series expansions of irregular "
           "targets eventually diverge as terms are added, so prefer a small number of terms (about 3-5)")


class ExpansionError(ValueError):
    pass


@dataclass(frozen=True)
class TermDiagnostics:
    """Per-term values tau_m, partial sums and divergence onset (-1 when absent).

    Arrays have shape (M+1, P) and (P,) for P evaluation points.
    """

    terms: np.ndarray
    partial_sums: np.ndarray
    onset: np.ndarray

    @property
    def diverging(self):
        return bool(np.any(self.onset >= 0))


NOISE_FLOOR = 1e-12


def divergence_onset(terms, floor=NOISE_FLOOR):
    """Smallest m >= 1 with |tau_{m+1}| > |tau_m|, per column; -1 if none.

    Terms no larger than floor times the column scale (largest |tau| or partial
    sum) count as zero, so rounding residue in an exact series never fires.
    """
    a = np.abs(np.atleast_2d(np.asarray(terms, dtype=float)))
    if floor > 0 and a.size:
        scale = np.maximum(a.max(axis=0), np.abs(np.cumsum(np.atleast_2d(terms), axis=0)).max(axis=0))
        a = np.where(a <= floor * scale, 0.0, a)
    if a.shape[0] < 3:
        return np.full(a.shape[1], -1)
    grow = a[2:] > a[1:-1]
    first = np.argmax(grow, axis=0) + 1
    return np.where(grow.any(axis=0), first, -1)


@dataclass(eq=False)
class ExpansionResult:
    kind: str
    order: object
    coefficients: list
    cfg: GeneratorConfig
    smoother: Smoother | None = None
    meta: dict = field(default_factory=dict)

    @property
    def roots(self):
        if self.kind == "two_param":
            return [self.coefficients[k] for k in sorted(self.coefficients)]
        if self.kind == "jump_shortcut":
            return [g for row in self.coefficients for g in row]
        return list(self.coefficients)

    @cached_property
    def compiled(self):
        return sx.compile_exprs(self.roots)

    @property
    def max_order(self):
        return self.order[1] if self.kind == "two_param" else self.order

    def node_count(self):
        return sx.count_nodes(self.roots)

    def qload(self):
        return max(g.qload for g in self.roots)

    def content_hash(self):
        return expansion_key(self.kind, self.order, self.cfg, self.smoother, self.meta)

    def dumps(self):
        """Serializable form: shared-node expression table plus metadata."""
        return {"kind": self.kind, "order": self.order, "meta": self.meta, "hash": self.content_hash(),
                "dag": sx.dumps_dag(self.roots)}

    def _eval_roots(self, x, t, params):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        t = np.asarray(t, dtype=float)
        P = max(x.shape[1], t.size, *[np.size(v) for v in (params or {}).values()])
        x = np.broadcast_to(x, (x.shape[0], P))
        t = np.broadcast_to(t.ravel(), (P,))
        params = {k: np.broadcast_to(np.asarray(v, dtype=float).ravel(), (P,)) for k, v in (params or {}).items()}
        chunk = max(1, EVAL_CHUNK // max(1, self.qload()))
        outs = []
        for lo in range(0, P, chunk):
            hi = min(P, lo + chunk)
            outs.append(self.compiled(x[:, lo:hi], t[lo:hi], {k: v[lo:hi] for k, v in params.items()}))
        return [np.concatenate([o[i] for o in outs]) for i in range(len(self.roots))], P


def expansion_key(kind, order, cfg, smoother=None, meta=None):
    """Content hash of (kind, order, model spec, jump rule, smoother, extra metadata)."""
    h = hashlib.sha256()
    h.update(json.dumps({"kind": kind, "order": order, "meta": meta or {}}, sort_keys=True, default=str).encode())
    h.update(json.dumps(cfg.model.to_spec(), sort_keys=True).encode())
    if cfg.jump_rule is not None:
        h.update(cfg.jump_rule.key.encode())
    if smoother is not None:
        h.update(sx.to_sexpr(smoother.expr).encode())
    return h.hexdigest()


def load_expansion(obj, cfg, smoother=None):
    """Rebuild a result written by ExpansionResult.dumps; the hash must match cfg and smoother."""
    kind, order, meta = obj["kind"], obj["order"], obj.get("meta", {})
    if isinstance(order, list):
        order = tuple(order)
    if expansion_key(kind, order, cfg, smoother, meta) != obj.get("hash"):
        raise ExpansionError("cached expansion does not match this model, rule and smoother")
    roots = sx.loads_dag(obj["dag"])
    if kind == "two_param":
        M1, M2 = order
        keys = [(a, b) for a in range(M1 + 1) for b in range(M2 + 1)]
        coeffs = dict(zip(sorted(keys), roots))
    elif kind == "jump_shortcut":
        coeffs = [roots[i:i + order + 1] for i in range(0, len(roots), order + 1)]
    else:
        coeffs = roots
    return ExpansionResult(kind, order, coeffs, cfg, smoother, meta)


def _grow(cfg, e0, M, op):
    coeffs = [sx.simplify(e0)]
    start = sx.table_size()
    for _ in range(M):
        coeffs.append(op(cfg, coeffs[-1]))
        if sx.table_size() - start > cfg.max_nodes:
            raise BudgetExceeded(f"expression budget of {cfg.max_nodes} nodes exceeded at order {len(coeffs) - 1}")
    return coeffs


def _check_order(M, max_order):
    if not isinstance(M, (int, np.integer)) or M < 0:
        raise ExpansionError("order must be a nonnegative integer")
    if M > max_order:
        raise ExpansionError(f"order {M} exceeds the cap {max_order}")


def expand_regular(cfg, f, M=DEFAULT_ORDER, max_order=MAX_ORDER):
    """g_m = B^m f for time-independent f."""
    _check_order(M, max_order)
    f = sx.as_expr(f)
    if f.mask & sx.TIME_BIT:
        raise ExpansionError("regular expansion needs a time-independent f")
    return ExpansionResult("regular", int(M), _grow(cfg, f, M, apply_B), cfg)


def expand_smoothed(cfg, sm, M=DEFAULT_ORDER, max_order=MAX_ORDER):
    """g_m = (A - r - d/dt)^m u_{0,t}."""
    _check_order(M, max_order)
    return ExpansionResult("smoothed", int(M), _grow(cfg, sm.expr, M, apply_B_minus_dt), cfg, sm)


def expand_two_param(cfg, sm, M1, M2, max_order=MAX_ORDER):
    """g_{m1,m2} = B^{m2} d_s^{m1} u_{0,s}; evaluated at independent (s, t)."""
    _check_order(M1, max_order)
    _check_order(M2, max_order)
    grid = {}
    h = sx.simplify(sm.expr)
    for m1 in range(M1 + 1):
        for m2, g in enumerate(_grow(cfg, h, M2, apply_B)):
            grid[(m1, m2)] = g
        h = sx.differentiate(h, "t")
    return ExpansionResult("two_param", (int(M1), int(M2)), grid, cfg, sm)


def poisson_k_max(lam_t, tol=1e-12):
    k = 0
    while stats.poisson.sf(k, lam_t) >= tol:
        k += 1
    return k


def expand_jump_shortcut(cfg, f, M=DEFAULT_ORDER, k_max=None, t_max=1.0, quad_n=10, max_order=MAX_ORDER):
    """Constant-intensity shortcut: sum_k Pois_k(lam t) sum_m t^m/m! (A_D - r - d/dt)^m E[f(x + Y_k)].

    Y_k is the sum of k jumps (normal jumps: closed-form convolution integrated by a
    Gauss-Hermite rule).  f may be time-independent or a smoother of the diffusive
    part.  Poisson weights are applied at evaluation time.
    """
    _check_order(M, max_order)
    model = cfg.model
    f = sx.as_expr(f)
    if model.has_jumps:
        if not model.intensity.is_const():
            raise ExpansionError("the shortcut needs a constant jump intensity")
        if not model.discount.is_const():
            raise ExpansionError("the shortcut needs a constant discount rate")
        lam = model.intensity.value
    else:
        lam = 0.0
    if k_max is None:
        k_max = poisson_k_max(lam * t_max) if lam > 0 else 0
    elif lam > 0 and stats.poisson.sf(k_max, lam * t_max) > 1e-12:
        warnings.warn(f"k_max={k_max} leaves Poisson tail weight above 1e-12 at t={t_max}", stacklevel=2)
    rows = []
    for k in range(k_max + 1):
        base = f if k == 0 else sx.quadsum(f, convolution_rule(model.jumps, k, quad_n))
        rows.append(_grow(cfg, base, M, apply_AD_minus_r_dt))
    meta = {"lam": lam, "k_max": int(k_max), "t_max": t_max, "quad_n": quad_n}
    return ExpansionResult("jump_shortcut", int(M), rows, cfg, None, meta)


def evaluate_expansion(res, p=None, *, x=None, t=None, s=None, params=None, M=None, total_order=False):
    """Partial sum at (x, t) with per-term diagnostics.

    p may be an EvalPoint; otherwise x has shape (d,) or (d, P) and t is a scalar
    or (P,).  Two-parameter expansions take the smoother time s separately; their
    terms are grouped by m2 over the full (M1, M2) rectangle, or with
    total_order=True by m1 + m2 <= M, where M <= min(M1, M2).
    M < res.order truncates the series.  Returns (value, TermDiagnostics); value is
    a float for a single point and an array otherwise.
    """
    if p is not None:
        x, t = p.x, p.t
    if x is None or t is None:
        raise ExpansionError("evaluation needs x and t")
    single = np.ndim(x) == 1 and np.ndim(t) == 0 and all(np.ndim(v) == 0 for v in (params or {}).values())
    avail = min(res.order) if res.kind == "two_param" and total_order else res.max_order
    Mtop = avail if M is None else int(M)
    if Mtop > avail or Mtop < 0:
        raise ExpansionError(f"requested order {Mtop} but the expansion has order {avail}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0):
        raise ExpansionError("t must be nonnegative")
    fact = [math.factorial(m) for m in range(Mtop + 1)]

    if res.kind == "regular":
        vals, P = res._eval_roots(x, 0.0, params)
        t_b = np.broadcast_to(t_arr, (P,))
        terms = np.array([t_b**m / fact[m] * vals[m] for m in range(Mtop + 1)])
    elif res.kind == "smoothed":
        terms = _smoothed_terms(res, x, t_arr, params, Mtop, fact)
    elif res.kind == "two_param":
        s_arr = t_arr if s is None else np.atleast_1d(np.asarray(s, dtype=float))
        if np.any(s_arr <= 0):
            raise ExpansionError("two-parameter expansions need s > 0")
        vals, P = res._eval_roots(x, s_arr, params)
        keys = sorted(res.coefficients)
        g = dict(zip(keys, vals))
        s_b = np.broadcast_to(s_arr, (P,))
        t_b = np.broadcast_to(t_arr, (P,))
        M1 = res.order[0]
        terms = np.zeros((Mtop + 1, P))
        for m2 in range(Mtop + 1):
            for m1 in range(M1 + 1):
                if total_order and m1 + m2 > Mtop:
                    break
                terms[m1 + m2 if total_order else m2] += (
                    (-s_b) ** m1 * t_b**m2 / (math.factorial(m1) * fact[m2]) * g[(m1, m2)])
    elif res.kind == "jump_shortcut":
        vals, P = res._eval_roots(x, t_arr, params)
        lam, k_max = res.meta["lam"], res.meta["k_max"]
        t_b = np.broadcast_to(t_arr, (P,))
        if lam > 0 and np.any(stats.poisson.sf(k_max, lam * t_b) > 1e-12):
            warnings.warn("Poisson truncation above 1e-12 at the evaluation time", stacklevel=2)
        M = res.order
        terms = np.zeros((Mtop + 1, P))
        for k in range(k_max + 1):
            wk = stats.poisson.pmf(k, lam * t_b) if lam > 0 else np.ones(P)
            for m in range(Mtop + 1):
                terms[m] += wk * t_b**m / fact[m] * vals[k * (M + 1) + m]
    else:
        raise ExpansionError(f"unknown expansion kind {res.kind!r}")

    partial = np.cumsum(terms, axis=0)
    diag = TermDiagnostics(terms, partial, divergence_onset(terms))
    value = partial[-1]
    if single:
        return float(value[0]), diag
    return value, diag


def _smoothed_terms(res, x, t_arr, params, Mtop, fact):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    P = max(x.shape[1], t_arr.size, *[np.size(v) for v in (params or {}).values()])
    t_b = np.broadcast_to(t_arr, (P,))
    pos = t_b > 0
    terms = np.zeros((Mtop + 1, P))
    if np.any(pos):
        xb = np.broadcast_to(x, (x.shape[0], P))[:, pos]
        pp = {k: np.broadcast_to(np.asarray(v, dtype=float).ravel(), (P,))[pos] for k, v in (params or {}).items()}
        vals, _ = res._eval_roots(xb, t_b[pos], pp)
        for m in range(Mtop + 1):
            terms[m, pos] = t_b[pos] ** m / fact[m] * vals[m]
    if not np.all(pos):
        # t = 0: limit convention, the series collapses to the target f(x)
        if res.smoother is None or res.smoother.limit is None:
            raise ExpansionError("t = 0 needs an evaluable target; this smoother has none (e.g. a Dirac target)")
        xb = np.broadcast_to(x, (x.shape[0], P))[:, ~pos]
        terms[0, ~pos] = sx.evaluate_batch(res.smoother.limit, xb, 0.0)
    return terms


# ---------------------------------------------------------------------------
# densities


@dataclass(eq=False)
class DensityApprox:
    """p_hat_t(y|x) from a Gaussian auxiliary density with symbolic target y."""

    result: ExpansionResult
    mu0: np.ndarray
    sigma0_sq: np.ndarray

    @property
    def d(self):
        return self.mu0.size

    def _params(self, y):
        y = np.asarray(y, dtype=float)
        if y.ndim == 1 and self.d > 1:
            y = y[:, None]
        y = np.atleast_2d(y) if self.d > 1 else np.atleast_2d(y.ravel())
        return {f"y{i}": y[i] for i in range(self.d)}

    def evaluate(self, y, x, t, M=None):
        """(values, TermDiagnostics) over the y points (shape (d, P) or (P,) for d = 1)."""
        return evaluate_expansion(self.result, x=np.asarray(x, dtype=float), t=t, params=self._params(y), M=M)

    def __call__(self, y, x, t, M=None):
        return self.evaluate(y, x, t, M)[0]


def density_approx(cfg, aux, M=DEFAULT_ORDER, max_order=MAX_ORDER):
    mu0, s2 = aux
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    s2 = np.atleast_2d(np.asarray(s2, dtype=float))
    if mu0.size != cfg.d:
        raise ExpansionError("auxiliary drift must have the model dimension")
    sm = gaussian_density_smoother([f"y{i}" for i in range(cfg.d)], mu0, s2)
    return DensityApprox(expand_smoothed(cfg, sm, M, max_order), mu0, s2)


# ---------------------------------------------------------------------------
# polynomial processes


_PADE13 = (64764752532480000.0, 32382376266240000.0, 7771770303897600.0, 1187353796428800.0,
           129060195264000.0, 10559470521600.0, 670442572800.0, 33522128640.0, 1323241920.0,
           40840800.0, 960960.0, 16380.0, 182.0, 1.0)
_THETA13 = 5.371920351148152


def expm(A):
    """Matrix exponential: scaling and squaring with the degree-13 Pade approximant."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("expm needs a square matrix")
    if n == 0:
        return A.copy()
    norm = np.linalg.norm(A, 1)
    s = 0
    if norm > _THETA13:
        s = int(math.ceil(math.log2(norm / _THETA13)))
    A = A / 2.0**s
    b = _PADE13
    I = np.eye(n)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2) + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * I)
    V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * I
    R = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        R = R @ R
    return R


def monomial_basis(d, k):
    """Exponent tuples with total degree <= k, by degree then reverse-lexicographic."""
    out = []
    for deg in range(k + 1):
        level = [a for a in itertools.product(range(deg + 1), repeat=d) if sum(a) == deg]
        out += sorted(level, reverse=True)
    return out


@dataclass(frozen=True, eq=False)
class PolyGeneratorMatrix:
    basis: list
    matrix: np.ndarray
    cfg: GeneratorConfig

    def features(self, x):
        x = np.asarray(x, dtype=float)
        return np.array([np.prod([x[i] ** a[i] for i in range(len(a))], axis=0) for a in self.basis])

    def index(self, alpha):
        return self.basis.index(tuple(alpha))


def _degree(e, d, what):
    try:
        return sx.poly_degree(sx.to_polynomial(e, d))
    except sx.NotPolynomialError as exc:
        raise sx.NotPolynomialError(f"{what} is not polynomial: {exc}") from None


def poly_generator_matrix(cfg, k):
    """Matrix of (A - r) on monomials of degree <= k."""
    m = cfg.model
    d = m.dim
    for i, e in enumerate(m.drift):
        if _degree(e, d, f"drift[{i}]") > 1:
            raise sx.NotPolynomialError(f"drift[{i}] is not affine")
    for i in range(d):
        for j in range(d):
            if _degree(m.diffusion_sq[i][j], d, "diffusion_sq") > 2:
                raise sx.NotPolynomialError("diffusion_sq is not quadratic")
    if m.has_jumps and _degree(m.intensity, d, "intensity") > 1:
        raise sx.NotPolynomialError("intensity must be affine for degree preservation")
    if _degree(m.discount, d, "discount") > 0:
        raise sx.NotPolynomialError("discount must be constant")
    if m.has_jumps and cfg.jump_rule is not None and cfg.jump_rule.provenance.startswith("gauss"):
        n_per = round(cfg.jump_rule.S ** (1.0 / len(m.jumps.coords)))
        if 2 * n_per - 1 < k:
            warnings.warn("quadrature too small to integrate jump moments of this degree exactly", stacklevel=2)
    basis = monomial_basis(d, k)
    index = {a: i for i, a in enumerate(basis)}
    A = np.zeros((len(basis), len(basis)))
    for i, a in enumerate(basis):
        p = sx.to_polynomial(apply_B(cfg, sx.monomial(a)), d)
        for key, c in p.items():
            if key not in index:
                raise sx.NotPolynomialError(f"generator maps x^{a} outside degree {k}")
            A[i, index[key]] = c
    return PolyGeneratorMatrix(basis, A, cfg)


def poly_moment(pg, c, t, x):
    """c' exp(t A) e(x): the exact polynomial moment."""
    c = np.asarray(c, dtype=float)
    if c.shape != (len(pg.basis),):
        raise ValueError(f"coefficient vector must have length {len(pg.basis)}")
    return float(c @ expm(t * pg.matrix) @ pg.features(x))
