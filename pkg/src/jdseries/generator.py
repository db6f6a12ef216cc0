"""Generator actions on expressions: A_D, the quadrature jump part, -r and -d/dt."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import symexpr as sx
from .model import JumpDiffusionModel
from .quadrature import QuadratureRule, jump_rule
from .symexpr import add, const, differentiate, mul, sub


class GeneratorError(ValueError):
    pass


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class GeneratorConfig:
    """A model together with the rule that discretizes its jump integral.

    polynomial_jumps: when an expression is a polynomial, the quadrature sum is
    multiplied out into an explicit polynomial (an exact rewrite) instead of a
    quad node; this keeps long expansions of polynomial moments compact.
    max_nodes: limit on new interned nodes created by one expansion.
    """

    model: JumpDiffusionModel
    jump_rule: QuadratureRule | None = None
    simplify_each_step: bool = True
    polynomial_jumps: bool = True
    max_nodes: int = 5_000_000
    _half_diag: tuple = field(init=False, repr=False)

    def __post_init__(self):
        m = self.model
        rule = self.jump_rule
        if m.has_jumps and rule is None:
            raise GeneratorError("model has jumps but no quadrature rule was given")
        if not m.has_jumps and rule is not None:
            raise GeneratorError("quadrature rule given for a pure-diffusion model")
        if rule is not None:
            if rule.dim != m.dim:
                raise GeneratorError(f"rule dimension {rule.dim} does not match model dimension {m.dim}")
            allowed = 0
            for c in m.jumps.coords:
                allowed |= 1 << c
            if rule.shift_mask & ~allowed:
                raise GeneratorError("rule moves coordinates that do not jump")
        half = tuple(mul(const(0.5), m.diffusion_sq[i][i]) for i in range(m.dim))
        object.__setattr__(self, "_half_diag", half)

    @property
    def d(self):
        return self.model.dim


def make_config(model, n=10, rule=None, **kwargs):
    """GeneratorConfig with an n-point Gauss rule per jumping coordinate."""
    if model.has_jumps and rule is None:
        rule = jump_rule(model.jumps, n)
    return GeneratorConfig(model, rule if model.has_jumps else None, **kwargs)


def _check_vars(cfg, e):
    if sx.max_state_index(e) >= cfg.d:
        raise GeneratorError(f"expression uses x{sx.max_state_index(e)} but the model has dimension {cfg.d}")


def apply_AD(cfg, e):
    """sum_i mu_i d_i e + 1/2 sum_ij sigma2_ij d_ij e."""
    e = sx.as_expr(e)
    _check_vars(cfg, e)
    m = cfg.model
    d = m.dim
    terms = []
    for i in range(d):
        if not e.mask >> i & 1:
            continue
        di = differentiate(e, i)
        mu = m.drift[i]
        if not mu.is_const(0.0):
            terms.append(mul(mu, di))
        for j in range(i, d):
            s = cfg._half_diag[i] if i == j else m.diffusion_sq[i][j]
            if s.is_const(0.0) or not di.mask >> j & 1:
                continue
            terms.append(mul(s, differentiate(di, j)))
    return _finish(cfg, sx.sum_exprs(terms))


def apply_AJ_hat(cfg, e):
    """lambda(x) [sum_s w_s e(x + c_s) - e(x)]."""
    e = sx.as_expr(e)
    _check_vars(cfg, e)
    if cfg.jump_rule is None:
        raise GeneratorError("no jump rule: the model has no jumps")
    rule = cfg.jump_rule
    if not e.mask & rule.shift_mask:
        return sx.ZERO
    if cfg.polynomial_jumps and e.poly:
        p = sx.to_polynomial(e, cfg.d)
        q = {}
        for w, c in zip(rule.weights, rule.nodes):
            q = sx._padd(q, sx._pshift(p, c, cfg.d), float(w))
        diff = sx.from_polynomial(sx._padd(q, p, -1.0))
    else:
        diff = sub(sx.quadsum(e, rule), e)
    return _finish(cfg, mul(cfg.model.intensity, diff))


def apply_B(cfg, e):
    """(A - r) e."""
    e = sx.as_expr(e)
    out = apply_AD(cfg, e)
    if cfg.model.has_jumps:
        out = add(out, apply_AJ_hat(cfg, e))
    r = cfg.model.discount
    if not r.is_const(0.0):
        out = sub(out, mul(r, e))
    return _finish(cfg, out)


def apply_B_minus_dt(cfg, e):
    """(A - r - d/dt) e."""
    e = sx.as_expr(e)
    return _finish(cfg, sub(apply_B(cfg, e), differentiate(e, "t")))


def apply_AD_minus_r_dt(cfg, e):
    """(A_D - r - d/dt) e: the diffusive operator used with the compound-Poisson shortcut."""
    e = sx.as_expr(e)
    out = apply_AD(cfg, e)
    r = cfg.model.discount
    if not r.is_const(0.0):
        out = sub(out, mul(r, e))
    return _finish(cfg, sub(out, differentiate(e, "t")))


def _finish(cfg, e):
    if cfg.simplify_each_step:
        e = sx.simplify(e)
    if cfg.polynomial_jumps and e.poly and not e.mask & sx.TIME_BIT:
        e = sx.from_polynomial(sx.to_polynomial(e, max(cfg.d, sx.max_state_index(e) + 1)))
    return e
