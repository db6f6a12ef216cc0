import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from jdseries import mcbench as mc
from jdseries import symexpr as sx
from jdseries.generator import (GeneratorConfig, GeneratorError, apply_AD, apply_AJ_hat, apply_B, apply_B_minus_dt,
                                make_config)
from jdseries.model import (JumpDiffusionModel, JumpDistribution, NormalJump, build_catalog_model,
                            catalog_defaults, gaussian_density_smoother, make_bm_auxiliary, make_cir, make_ou)
from jdseries.quadrature import jump_rule

x0, x1, t = sx.var(0), sx.var(1), sx.T


def ev(e, x, tt=0.0):
    return sx.evaluate(e, x, tt)


def jump_model(lam=0.7, m=-0.05, s=0.1, r=0.0):
    return JumpDiffusionModel(1, (sx.const(0.02),), ((sx.const(0.04),),), sx.const(lam),
                              JumpDistribution(1, ((0, NormalJump(m, s)),)), r)


def test_AD_examples():
    cfg = make_config(make_bm_auxiliary([0.3], [[0.5]]))
    for x in (-1.0, 0.4, 2.0):
        assert ev(apply_AD(cfg, x0 * x0), [x]) == pytest.approx(2 * 0.3 * x + 0.5, rel=1e-14)
    k, a, s = 2.0, 0.04, 0.3
    cir = make_config(make_cir(k, a, s))
    for v in (0.01, 0.09):
        assert ev(apply_AD(cir, x0), [v]) == pytest.approx(k * (a - v))
        assert ev(apply_AD(cir, x0 * x0), [v]) == pytest.approx(2 * v * k * (a - v) + s * s * v, rel=1e-13)


def test_AD_cir_square_against_simulation():
    # finite difference of E[v_t^2] at small t
    k, a, s, v0, h = 2.0, 0.04, 0.3, 0.09, 0.01
    m = make_cir(k, a, s)
    est = mc.simulate_moment(m, x0 * x0, h, [v0], mc.MCConfig(paths=200_000, steps_per_year=10_000, seed=4))
    fd = (est.mean - v0**2) / h
    exact = 2 * v0 * k * (a - v0) + s * s * v0
    assert abs(fd - exact) < 4 * est.std_error / h + 0.05 * abs(exact)


def test_AJ_examples():
    m = jump_model(lam=0.7, m=-0.05, s=0.1)
    for n in (1, 2, 10):
        cfg = make_config(m, n=n)
        assert ev(apply_AJ_hat(cfg, x0), [0.3]) == pytest.approx(0.7 * -0.05, rel=1e-13)
        assert apply_AJ_hat(cfg, sx.const(3.0)).is_const(0.0)
    cfg = make_config(jump_model(lam=0.7, m=0.0, s=0.1), n=10)
    for x in (-0.5, 0.0, 1.0):
        ref = 0.7 * (math.exp(0.005) - 1) * math.exp(x)
        assert ev(apply_AJ_hat(cfg, sx.exp(x0)), [x]) == pytest.approx(ref, rel=1e-10)


def test_AJ_requires_rule():
    cfg = make_config(make_ou(1.0, 0.0, 0.5))
    with pytest.raises(GeneratorError):
        apply_AJ_hat(cfg, x0)


def test_config_validation():
    m = jump_model()
    with pytest.raises(GeneratorError):
        GeneratorConfig(m, None)
    with pytest.raises(GeneratorError):
        GeneratorConfig(make_ou(1.0, 0.0, 0.5), jump_rule(m.jumps, 3))
    two = build_catalog_model("sqr")
    with pytest.raises(GeneratorError):
        GeneratorConfig(two, jump_rule(m.jumps, 3))  # dimension 1 rule on a 2-d model


def test_B_examples():
    ou = make_ou(1.5, 0.0, 0.5)
    cfg = make_config(ou)
    e = sx.exp(sx.mul(sx.const(0.3), x0))
    assert ev(apply_B(cfg, e), [0.4]) == ev(apply_AD(cfg, e), [0.4])
    disc = JumpDiffusionModel(1, ou.drift, ou.diffusion_sq, discount=0.05)
    assert ev(apply_B(make_config(disc), sx.ONE), [0.3]) == pytest.approx(-0.05)
    twice = apply_B(cfg, apply_B(cfg, x0))
    for x in (-1.0, 0.7):
        assert ev(twice, [x]) == pytest.approx(1.5**2 * x, rel=1e-14)


def test_B_minus_dt_examples():
    cfg = make_config(make_bm_auxiliary([0.3], [[0.5]]))
    assert apply_B_minus_dt(cfg, sx.exp(x0)) is apply_B(cfg, sx.exp(x0))
    for x, tt in ((0.2, 0.5), (-1.0, 2.0)):
        assert ev(apply_B_minus_dt(cfg, t * x0), [x], tt) == pytest.approx(0.3 * tt - x)


def test_auxiliary_fixed_point(rng):
    mu, s2 = np.array([0.1, -0.2]), np.array([[0.5, 0.1], [0.1, 0.3]])
    cfg = make_config(make_bm_auxiliary(mu, s2))
    sm = gaussian_density_smoother([0.3, -0.1], mu, s2)
    g = apply_B_minus_dt(cfg, sm.expr)
    for _ in range(50):
        x = rng.normal(0, 0.5, 2)
        tt = rng.uniform(0.05, 1.0)
        assert abs(ev(g, x, tt)) < 1e-9


smooth_1d = st.sampled_from([x0, x0 * x0, sx.exp(x0), sx.call("normal_cdf", x0), x0 * sx.exp(x0)])


@given(smooth_1d, smooth_1d, st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1))
def test_B_linearity(e1, e2, a, b, x):
    cfg = make_config(jump_model(r=0.03), n=6)
    lhs = ev(apply_B(cfg, sx.add(sx.mul(sx.const(a), e1), sx.mul(sx.const(b), e2))), [x])
    rhs = a * ev(apply_B(cfg, e1), [x]) + b * ev(apply_B(cfg, e2), [x])
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs), abs(rhs))


def test_quadrature_consistency():
    m = jump_model(m=0.0, s=0.3)
    e = sx.call("normal_cdf", sx.mul(sx.const(3.0), x0))
    gaps = []
    for n in (2, 4, 8, 16):
        a = ev(apply_AJ_hat(make_config(m, n=n), e), [0.1])
        b = ev(apply_AJ_hat(make_config(m, n=2 * n), e), [0.1])
        gaps.append(abs(a - b))
    assert all(g2 < g1 for g1, g2 in zip(gaps, gaps[1:]))


@pytest.mark.parametrize("name", ["logvol", "sqr", "cev", "garch", "two_factor", "merton"])
def test_martingale_property(name):
    p = dict(catalog_defaults()[name]["params"], r=0.0, delta=0.0)
    m = build_catalog_model(name, p)
    cfg = make_config(m, n=10)
    state = catalog_defaults()[name]["state"]
    g = apply_B(cfg, sx.exp(x0))
    val = ev(g, state)
    assert abs(val) <= 1e-9 * math.exp(state[0])


def test_polynomial_jumps_rewrite_is_exact():
    m = build_catalog_model("sqr")
    e = x0 * x0 * x1
    a = make_config(m, n=5, polynomial_jumps=True)
    b = make_config(m, n=5, polynomial_jumps=False)
    for x in ([4.6, 0.04], [4.5, 0.1]):
        assert ev(apply_B(a, e), x) == pytest.approx(ev(apply_B(b, e), x), rel=1e-12)


@pytest.mark.parametrize("e_text", ["x0", "exp(0.5 * x0)"])
def test_dynkin_check(e_text):
    m = jump_model(lam=2.0, m=-0.05, s=0.1)
    e = sx.parse(e_text)
    h = 1e-3
    est = mc.simulate_moment(m, e, h, [0.1], mc.MCConfig(paths=400_000, steps_per_year=10_000, seed=11))
    lhs = (est.mean - ev(e, [0.1])) / h
    rhs = ev(apply_B(make_config(m, n=10), e), [0.1])
    assert abs(lhs - rhs) < 3 * est.std_error / h + 10 * h * (1 + abs(rhs))
