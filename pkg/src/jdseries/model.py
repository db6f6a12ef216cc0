"""Jump-diffusion model specifications, smoothers and the benchmark catalog.

A model is dx = mu(x) dt + sigma(x) dW + J dN with state-independent jump sizes and
intensity lambda(x).  Only sigma sigma^T is stored: it is all the generator needs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import ClassVar

import numpy as np

from . import symexpr as sx
from .symexpr import add, const, div, mul, neg, power, sub, var


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# jump-size laws


@dataclass(frozen=True)
class NormalJump:
    mean: float
    sd: float
    kind: ClassVar[str] = "normal"

    def __post_init__(self):
        if not self.sd > 0:
            raise ModelError("normal jump sd must be positive")

    def sample(self, rng, size):
        return rng.normal(self.mean, self.sd, size)

    def expected_exp(self):
        return math.exp(self.mean + 0.5 * self.sd**2)

    def first_moment(self):
        return self.mean

    def params(self):
        return {"mean": self.mean, "sd": self.sd}


@dataclass(frozen=True)
class DoubleExponentialJump:
    """Laplace law with density exp(-|c|/scale)/(2 scale)."""

    scale: float
    kind: ClassVar[str] = "double_exponential"

    def __post_init__(self):
        if not self.scale > 0:
            raise ModelError("double exponential scale must be positive")

    def sample(self, rng, size):
        return rng.laplace(0.0, self.scale, size)

    def expected_exp(self):
        if self.scale >= 1:
            return math.inf
        return 1.0 / (1.0 - self.scale**2)

    def first_moment(self):
        return 0.0

    def params(self):
        return {"scale": self.scale}


@dataclass(frozen=True)
class ExponentialJump:
    mean: float
    kind: ClassVar[str] = "exponential"

    def __post_init__(self):
        if not self.mean > 0:
            raise ModelError("exponential jump mean must be positive")

    def sample(self, rng, size):
        return rng.exponential(self.mean, size)

    def expected_exp(self):
        return math.inf if self.mean >= 1 else 1.0 / (1.0 - self.mean)

    def first_moment(self):
        return self.mean

    def params(self):
        return {"mean": self.mean}


_JUMP_KINDS = {"normal": NormalJump, "double_exponential": DoubleExponentialJump, "exponential": ExponentialJump}


@dataclass(frozen=True)
class JumpDistribution:
    """Independent marginals on some coordinates, all driven by one Poisson clock."""

    dim: int
    marginals: tuple  # ((coord, marginal), ...) sorted by coord

    def __post_init__(self):
        margs = tuple(sorted(((int(c), m) for c, m in self.marginals), key=lambda cm: cm[0]))
        if not margs:
            raise ModelError("jump distribution needs at least one jumping coordinate")
        coords = [c for c, _ in margs]
        if len(set(coords)) != len(coords) or coords[0] < 0 or coords[-1] >= self.dim:
            raise ModelError("jump coordinates must be distinct and inside the state dimension")
        object.__setattr__(self, "marginals", margs)

    @property
    def coords(self):
        return tuple(c for c, _ in self.marginals)

    def marginal(self, coord):
        for c, m in self.marginals:
            if c == coord:
                return m
        return None

    def mean_vector(self):
        """E[c_i] per coordinate."""
        out = np.zeros(self.dim)
        for c, m in self.marginals:
            out[c] = m.first_moment()
        return out

    def proportional_mean_vector(self):
        """E[exp(c_i)] - 1 per coordinate (J-bar for a log-price coordinate)."""
        out = np.zeros(self.dim)
        for c, m in self.marginals:
            out[c] = m.expected_exp() - 1.0
        return out


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class JumpDiffusionModel:
    dim: int
    drift: tuple
    diffusion_sq: tuple
    intensity: object = None
    jumps: JumpDistribution | None = None
    discount: object = None
    names: tuple = ()
    positive: tuple = ()  # coordinates truncated at zero inside coefficients (simulation)
    label: str = "custom"

    def __post_init__(self):
        d = int(self.dim)
        if d < 1:
            raise ModelError("dimension must be >= 1")
        drift = tuple(sx.simplify(sx.as_expr(e)) for e in self.drift)
        if len(drift) != d:
            raise ModelError(f"drift has {len(drift)} entries for dimension {d}")
        rows = tuple(tuple(sx.simplify(sx.as_expr(e)) for e in row) for row in self.diffusion_sq)
        if len(rows) != d or any(len(r) != d for r in rows):
            raise ModelError("diffusion_sq must be a d x d matrix")
        for i in range(d):
            for j in range(i):
                if rows[i][j] is not rows[j][i]:
                    raise ModelError(f"diffusion_sq is not symmetric at ({i},{j})")
        lam = None if self.intensity is None else sx.simplify(sx.as_expr(self.intensity))
        if lam is not None and lam.is_const(0.0):
            lam = None
        jumps = self.jumps
        if (lam is None) != (jumps is None):
            if lam is None:
                jumps = None  # zero intensity switches jumps off
            else:
                raise ModelError("intensity and jump distribution must be given together")
        if jumps is not None and jumps.dim != d:
            raise ModelError("jump distribution dimension does not match the model")
        disc = sx.ZERO if self.discount is None else sx.simplify(sx.as_expr(self.discount))
        for e in (*drift, *(c for r in rows for c in r), disc, *(() if lam is None else (lam,))):
            if e.mask & sx.TIME_BIT:
                raise ModelError("model coefficients must not depend on time")
            if sx.max_state_index(e) >= d:
                raise ModelError(f"coefficient references x{sx.max_state_index(e)} outside dimension {d}")
            if sx.params_of(e):
                raise ModelError(f"unresolved symbols {sx.params_of(e)} in model coefficient")
        names = tuple(self.names) if self.names else tuple(f"x{i}" for i in range(d))
        if len(names) != d:
            raise ModelError("names must have one entry per coordinate")
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "diffusion_sq", rows)
        object.__setattr__(self, "intensity", lam)
        object.__setattr__(self, "jumps", jumps)
        object.__setattr__(self, "discount", disc)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "positive", tuple(int(p) for p in self.positive))

    @property
    def has_jumps(self):
        return self.intensity is not None

    @property
    def jump_mean_vector(self):
        if self.jumps is None:
            return np.zeros(self.dim)
        return self.jumps.proportional_mean_vector()

    def without_jumps(self):
        return JumpDiffusionModel(self.dim, self.drift, self.diffusion_sq, None, None, self.discount,
                                  self.names, self.positive, self.label)

    def coefficient_exprs(self):
        """Flat list: drift, upper-triangle diffusion_sq, intensity (or 0), discount."""
        d = self.dim
        out = list(self.drift)
        out += [self.diffusion_sq[i][j] for i in range(d) for j in range(i, d)]
        out.append(self.intensity if self.intensity is not None else sx.ZERO)
        out.append(self.discount)
        return out

    def to_spec(self):
        d = self.dim
        spec = {
            "dim": d,
            "names": list(self.names),
            "drift": [sx.to_sexpr(e) for e in self.drift],
            "diffusion_sq": [[sx.to_sexpr(e) for e in row] for row in self.diffusion_sq],
            "intensity": None if self.intensity is None else sx.to_sexpr(self.intensity),
            "jumps": [] if self.jumps is None else [
                {"coord": c, "dist": m.kind, "params": m.params()} for c, m in self.jumps.marginals],
            "discount": sx.to_sexpr(self.discount),
            "positive": list(self.positive),
            "label": self.label,
        }
        return spec


def model_from_spec(spec):
    """Build a model from the JSON model-spec structure; errors name the field."""
    if not isinstance(spec, dict):
        raise ModelError("model spec must be a JSON object")

    def field_(name, default=...):
        if name in spec:
            return spec[name]
        if default is ...:
            raise ModelError(f"model spec: missing field '{name}'")
        return default

    d = field_("dim")
    if not isinstance(d, int) or d < 1:
        raise ModelError("model spec: 'dim' must be a positive integer")
    names = list(field_("names", [f"x{i}" for i in range(d)]))
    lookup = {nm: var(i) for i, nm in enumerate(names)}

    def expr(text, where):
        if isinstance(text, (int, float)):
            return const(text)
        try:
            return sx.parse(text, lookup)
        except sx.ExprError as exc:
            raise ModelError(f"model spec field {where}: {exc}") from None

    drift = field_("drift")
    if not isinstance(drift, list) or len(drift) != d:
        raise ModelError("model spec: 'drift' must be a list of length dim")
    drift = [expr(e, f"drift[{i}]") for i, e in enumerate(drift)]
    diff = field_("diffusion_sq")
    if not isinstance(diff, list) or len(diff) != d or any(not isinstance(r, list) or len(r) != d for r in diff):
        raise ModelError("model spec: 'diffusion_sq' must be a dim x dim list")
    diff = [[expr(e, f"diffusion_sq[{i}][{j}]") for j, e in enumerate(r)] for i, r in enumerate(diff)]
    lam = field_("intensity", None)
    lam = None if lam is None else expr(lam, "intensity")
    jumps = None
    jl = field_("jumps", [])
    if jl:
        margs = []
        for k, j in enumerate(jl):
            try:
                cls = _JUMP_KINDS[j["dist"]]
                params = dict(j.get("params", {}))
                if cls is DoubleExponentialJump and "sd" in params:
                    params["scale"] = params.pop("sd")
                margs.append((int(j["coord"]), cls(**params)))
            except (KeyError, TypeError, ModelError) as exc:
                raise ModelError(f"model spec field jumps[{k}]: {exc!r}") from None
        jumps = JumpDistribution(d, tuple(margs))
    disc = expr(field_("discount", 0.0), "discount")
    try:
        return JumpDiffusionModel(d, tuple(drift), tuple(tuple(r) for r in diff), lam, jumps, disc,
                                  tuple(names), tuple(field_("positive", [])), field_("label", "custom"))
    except ModelError as exc:
        raise ModelError(f"model spec: {exc}") from None


# ---------------------------------------------------------------------------
# catalog


def _check(cond, msg):
    if not cond:
        raise ModelError(msg)


def _lognormal_jbar(m_j, sigma_j):
    return math.expm1(m_j + 0.5 * sigma_j**2)


def make_sv_model(beta, r, delta, kappa_v, alpha_v, sigma_v, rho, lam0, lam1, m_j, sigma_j):
    """Log-price with square-root / CEV / GARCH variance (beta = 1/2, in between, 1)."""
    _check(kappa_v > 0 and alpha_v > 0 and sigma_v > 0, "kappa_v, alpha_v, sigma_v must be positive")
    _check(0.5 <= beta <= 1.0, "beta must lie in [1/2, 1]")
    _check(abs(rho) < 1, "|rho| must be < 1")
    _check(lam0 >= 0 and lam1 >= 0, "intensities must be nonnegative")
    v = var(1)
    jumps_on = lam0 > 0 or lam1 > 0
    jbar = _lognormal_jbar(m_j, sigma_j) if jumps_on else 0.0
    lam = add(const(lam0), mul(const(lam1), v))
    drift_s = sub(sub(const(r - delta), mul(const(0.5), v)), mul(lam, const(jbar)))
    drift_v = mul(const(kappa_v), sub(const(alpha_v), v))
    cross = mul(const(rho * sigma_v), power(v, const(beta + 0.5)))
    vv = mul(const(sigma_v**2), power(v, const(2.0 * beta)))
    jumps = JumpDistribution(2, ((0, NormalJump(m_j, sigma_j)),)) if jumps_on else None
    label = {0.5: "sqr", 1.0: "garch"}.get(beta, "cev")
    return JumpDiffusionModel(2, (drift_s, drift_v), ((v, cross), (cross, vv)), lam if jumps_on else None,
                              jumps, None, ("s", "v"), (1,), label)


def make_logvol_model(r, delta, kappa_v, alpha_v, sigma_v, rho, lam0, lam1, m_j, sigma_j):
    """Log-price with Gaussian log-variance h = log v; intensity lam0 + lam1 e^h."""
    _check(kappa_v > 0 and sigma_v > 0, "kappa_v and sigma_v must be positive")
    _check(abs(rho) < 1, "|rho| must be < 1")
    _check(lam0 >= 0 and lam1 >= 0, "intensities must be nonnegative")
    h = var(1)
    ev = sx.call("exp", h)
    jumps_on = lam0 > 0 or lam1 > 0
    jbar = _lognormal_jbar(m_j, sigma_j) if jumps_on else 0.0
    lam = add(const(lam0), mul(const(lam1), ev))
    drift_s = sub(sub(const(r - delta), mul(const(0.5), ev)), mul(lam, const(jbar)))
    drift_h = mul(const(kappa_v), sub(const(alpha_v), h))
    cross = mul(const(rho * sigma_v), sx.call("exp", mul(const(0.5), h)))
    jumps = JumpDistribution(2, ((0, NormalJump(m_j, sigma_j)),)) if jumps_on else None
    return JumpDiffusionModel(2, (drift_s, drift_h), ((ev, cross), (cross, const(sigma_v**2))),
                              lam if jumps_on else None, jumps, None, ("s", "h"), (), "logvol")


def make_two_factor(r, delta, kappa_v, sigma_v, rho, kappa_m, alpha_m, sigma_m, lam0, lam1, lam2, m_j, sigma_j,
                    mu_jv):
    """(s, v, m): v reverts to the stochastic level m; joint jumps in s (normal) and v (exponential)."""
    _check(kappa_v > 0 and sigma_v > 0 and kappa_m > 0 and alpha_m > 0 and sigma_m > 0,
           "kappa_v, sigma_v, kappa_m, alpha_m, sigma_m must be positive")
    _check(abs(rho) < 1, "|rho| must be < 1")
    _check(min(lam0, lam1, lam2) >= 0, "intensities must be nonnegative")
    v, m = var(1), var(2)
    jumps_on = max(lam0, lam1, lam2) > 0
    if jumps_on:
        _check(mu_jv > 0, "mu_jv must be positive")
    jbar = _lognormal_jbar(m_j, sigma_j) if jumps_on else 0.0
    lam = add(add(const(lam0), mul(const(lam1), v)), mul(const(lam2), m))
    drift = (
        sub(sub(const(r - delta), mul(const(0.5), v)), mul(lam, const(jbar))),
        mul(const(kappa_v), sub(m, v)),
        mul(const(kappa_m), sub(const(alpha_m), m)),
    )
    sv = mul(const(rho * sigma_v), v)
    z = sx.ZERO
    diff = ((v, sv, z), (sv, mul(const(sigma_v**2), v), z), (z, z, mul(const(sigma_m**2), m)))
    jumps = JumpDistribution(3, ((0, NormalJump(m_j, sigma_j)), (1, ExponentialJump(mu_jv)))) if jumps_on else None
    return JumpDiffusionModel(3, drift, diff, lam if jumps_on else None, jumps, None, ("s", "v", "m"), (1, 2),
                              "two_factor")


def make_bm_auxiliary(mu0, sigma0_sq):
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    s2 = np.atleast_2d(np.asarray(sigma0_sq, dtype=float))
    d = mu0.size
    _check(s2.shape == (d, d), "sigma0_sq must be d x d")
    _check(np.allclose(s2, s2.T, rtol=0, atol=0), "sigma0_sq must be symmetric")
    try:
        np.linalg.cholesky(s2)
    except np.linalg.LinAlgError:
        raise ModelError("sigma0_sq must be positive definite") from None
    rows = tuple(tuple(const(s2[i, j]) for j in range(d)) for i in range(d))
    return JumpDiffusionModel(d, tuple(const(m) for m in mu0), rows, label="bm")


def make_gbm(r, sigma, delta=0.0):
    """Black-Scholes log-price: the auxiliary model of the call smoother."""
    _check(sigma > 0, "sigma must be positive")
    m = make_bm_auxiliary([r - delta - 0.5 * sigma**2], [[sigma**2]])
    return JumpDiffusionModel(1, m.drift, m.diffusion_sq, names=("s",), label="gbm")


def make_merton(r, sigma, lam, m_j, sigma_j, delta=0.0):
    _check(sigma > 0 and lam >= 0, "sigma > 0 and lam >= 0 required")
    jbar = _lognormal_jbar(m_j, sigma_j) if lam > 0 else 0.0
    drift = const(r - delta - 0.5 * sigma**2 - lam * jbar)
    jumps = JumpDistribution(1, ((0, NormalJump(m_j, sigma_j)),)) if lam > 0 else None
    return JumpDiffusionModel(1, (drift,), ((const(sigma**2),),), const(lam) if lam > 0 else None, jumps,
                              names=("s",), label="merton")


def make_ou(kappa, alpha, sigma):
    _check(kappa > 0 and sigma > 0, "kappa and sigma must be positive")
    x = var(0)
    return JumpDiffusionModel(1, (mul(const(kappa), sub(const(alpha), x)),), ((const(sigma**2),),), label="ou")


def make_cir(kappa, alpha, sigma):
    _check(kappa > 0 and alpha > 0 and sigma > 0, "kappa, alpha, sigma must be positive")
    v = var(0)
    return JumpDiffusionModel(1, (mul(const(kappa), sub(const(alpha), v)),), ((mul(const(sigma**2), v),),),
                              names=("v",), positive=(0,), label="cir")


_BUILDERS = {
    "sv": make_sv_model,
    "sqr": lambda **p: make_sv_model(0.5, **p),
    "cev": lambda beta=0.8, **p: make_sv_model(beta, **p),
    "garch": lambda **p: make_sv_model(1.0, **p),
    "logvol": make_logvol_model,
    "two_factor": make_two_factor,
    "bm": make_bm_auxiliary,
    "gbm": make_gbm,
    "merton": make_merton,
    "ou": make_ou,
    "cir": make_cir,
}


def catalog_defaults():
    """Default parameters, start states and provenance labels shipped with the package."""
    text = resources.files("jdseries").joinpath("data/catalog.json").read_text()
    return json.loads(text)


def build_catalog_model(name, params=None):
    """Catalog model with shipped defaults overridden by params."""
    if name not in _BUILDERS:
        raise ModelError(f"unknown catalog model {name!r}; choose from {sorted(_BUILDERS)}")
    entry = catalog_defaults().get(name, {})
    p = dict(entry.get("params", {}))
    p.update(params or {})
    try:
        m = _BUILDERS[name](**p)
    except TypeError as exc:
        raise ModelError(f"bad parameters for {name}: {exc}") from None
    if m.label != name:
        m = JumpDiffusionModel(m.dim, m.drift, m.diffusion_sq, m.intensity, m.jumps, m.discount, m.names,
                               m.positive, name)
    return m


# ---------------------------------------------------------------------------
# smoothers


@dataclass(frozen=True)
class Smoother:
    kind: str
    expr: object
    params: dict = field(default_factory=dict)
    limit: object = None  # the t -> 0 target f(x) when it can be evaluated

    def __post_init__(self):
        object.__setattr__(self, "expr", sx.as_expr(self.expr))


def gaussian_density_smoother(y, mu0, sigma0_sq):
    """Density of y - x ~ N(t mu0, t sigma0_sq).

    Entries of y may be numbers or parameter names; names stay symbolic so one
    expansion serves a whole y-grid.
    """
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    s2 = np.atleast_2d(np.asarray(sigma0_sq, dtype=float))
    d = mu0.size
    _check(s2.shape == (d, d) and np.allclose(s2, s2.T), "sigma0_sq must be symmetric d x d")
    try:
        np.linalg.cholesky(s2)
    except np.linalg.LinAlgError:
        raise ModelError("sigma0_sq must be positive definite") from None
    y = list(y) if np.ndim(y) else [y]
    _check(len(y) == d, "target y must have length d")
    ys = [sx.param(v) if isinstance(v, str) else const(v) for v in y]
    inv = np.linalg.inv(s2)
    t = sx.T
    z = [sub(sub(ys[i], var(i)), mul(const(mu0[i]), t)) for i in range(d)]
    q = sx.ZERO
    for i in range(d):
        q = add(q, mul(const(inv[i, i]), mul(z[i], z[i])))
        for j in range(i + 1, d):
            q = add(q, mul(const(2.0 * inv[i, j]), mul(z[i], z[j])))
    norm = (2.0 * math.pi) ** (-d / 2.0) / math.sqrt(np.linalg.det(s2))
    expr = mul(mul(const(norm), power(t, const(-d / 2.0))), sx.call("exp", neg(div(q, mul(const(2.0), t)))))
    return Smoother("gaussian_density", expr, {"y": y, "mu0": mu0.tolist(), "sigma0_sq": s2.tolist()})


def bs_call_smoother(K, r, sigma0, coord=0):
    """Undiscounted Black-Scholes call value E[(e^{x_T} - K)^+] as an Expr in (x, t)."""
    _check(K > 0 and sigma0 > 0, "K and sigma0 must be positive")
    x = var(coord)
    t = sx.T
    sq = sx.call("sqrt", t)
    m = sub(x, const(math.log(K)))
    d_plus = div(add(m, mul(const(r + 0.5 * sigma0**2), t)), mul(const(sigma0), sq))
    d_minus = sub(d_plus, mul(const(sigma0), sq))
    expr = sub(mul(sx.call("exp", add(x, mul(const(r), t))), sx.call("normal_cdf", d_plus)),
               mul(const(K), sx.call("normal_cdf", d_minus)))
    limit = sx.positive_part(sub(sx.call("exp", x), const(K)))
    return Smoother("bs_call", expr, {"K": K, "r": r, "sigma0": sigma0, "coord": coord}, limit)


def custom_smoother(expr, limit=None):
    return Smoother("custom", expr, {}, limit)
