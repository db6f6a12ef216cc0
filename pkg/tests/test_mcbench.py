import math

import numpy as np
import pytest
from scipy import integrate, stats

from jdseries import mcbench as mc
from jdseries import symexpr as sx
from jdseries.model import build_catalog_model, make_bm_auxiliary, make_gbm, make_ou, model_from_spec

x0 = sx.var(0)


def bs_call(S, K, r, sigma, t):
    d1 = (math.log(S / K) + (r + 0.5 * sigma**2) * t) / (sigma * math.sqrt(t))
    d2 = d1 - sigma * math.sqrt(t)
    return S * stats.norm.cdf(d1) - K * math.exp(-r * t) * stats.norm.cdf(d2)


def drift_only(drift):
    return model_from_spec({"dim": 1, "drift": [drift], "diffusion_sq": [[0.0]]})


def test_deterministic_path():
    m = drift_only(0.7)
    est = mc.simulate_moment(m, x0, 0.5, [1.0], mc.MCConfig(paths=1000, steps_per_year=100))
    assert est.mean == pytest.approx(1.35, abs=1e-12)
    assert est.std_error == 0.0
    assert est.paths_used == 1000


def test_gbm_call_against_black_scholes():
    r, s, t = 0.03, 0.2, 0.25
    spec = make_gbm(r, s).to_spec()
    spec["discount"] = r
    call = sx.positive_part(sx.sub(sx.exp(x0), sx.const(100.0)))
    est = mc.simulate_moment(model_from_spec(spec), call, t, [math.log(100.0)],
                             mc.MCConfig(paths=200_000, steps_per_year=2500, seed=7))
    ref = bs_call(100.0, 100.0, r, s, t)
    assert ref == pytest.approx(4.3576, abs=1e-4)
    assert abs(est.mean - ref) < 4 * est.std_error
    assert est.meta["seed"] == 7 and est.meta["steps"] == 625


def test_same_seed_bitwise_and_thread_independent():
    m = build_catalog_model("sqr")
    x = [math.log(100.0), 0.0416]
    f = sx.exp(x0)
    a = mc.simulate_moment(m, f, 0.1, x, mc.MCConfig(paths=30_000, steps_per_year=200, seed=3))
    b = mc.simulate_moment(m, f, 0.1, x, mc.MCConfig(paths=30_000, steps_per_year=200, seed=3))
    c = mc.simulate_moment(m, f, 0.1, x, mc.MCConfig(paths=30_000, steps_per_year=200, seed=3, threads=3))
    d = mc.simulate_moment(m, f, 0.1, x, mc.MCConfig(paths=30_000, steps_per_year=200, seed=4))
    assert a.mean == b.mean == c.mean and a.std_error == b.std_error == c.std_error
    assert d.mean != a.mean


def test_se_scaling():
    m = make_gbm(0.0, 0.3)
    f = sx.exp(x0)
    ratios = []
    for seed in range(3):
        small = mc.simulate_moment(m, f, 0.5, [0.0], mc.MCConfig(paths=20_000, steps_per_year=20, seed=seed))
        big = mc.simulate_moment(m, f, 0.5, [0.0], mc.MCConfig(paths=80_000, steps_per_year=20, seed=seed + 100))
        ratios.append(big.std_error / small.std_error)
    assert abs(np.mean(ratios) - 0.5) < 0.1


def test_antithetic_pairs_counted_once():
    m = make_bm_auxiliary([0.0], [[1.0]])
    sample = mc.simulate_terminal(m, 1.0, [0.0], mc.MCConfig(paths=20, steps_per_year=1, block=10))
    # linear f is exactly cancelled within each pair
    assert np.allclose(sample.states[0] + sample.states[0, sample.pair_index], 0.0)
    mean, se, n = mc.estimate(sample.states[0], sample)
    assert n == 10 and mean == pytest.approx(0.0, abs=1e-15) and se == 0.0
    odd = mc.MCConfig(paths=7, antithetic=True)
    assert sum(odd.block_sizes()) == 8


def test_drift_only_matches_ode():
    # Lipschitz constant of 1 - x^3 on the visited range [0.5, 1] is 3
    m = drift_only("1 - x0**3")
    cfg = mc.MCConfig(paths=4, steps_per_year=1000)
    t = 2.0
    est = mc.simulate_moment(m, x0, t, [0.5], cfg)
    sol = integrate.solve_ivp(lambda _, y: 1 - y**3, (0, t), [0.5], method="RK45", rtol=1e-12, atol=1e-12)
    assert abs(est.mean - sol.y[0, -1]) < 10 * (1 / 1000) * 3
    assert est.std_error == 0.0


def test_jump_count_mean():
    spec = {"dim": 1, "drift": [0.0], "diffusion_sq": [[1.0]], "intensity": 3.0,
            "jumps": [{"coord": 0, "dist": "normal", "params": {"mean": 0.0, "sd": 0.1}}]}
    sample = mc.simulate_terminal(model_from_spec(spec), 1.0, [0.0], mc.MCConfig(paths=40_000, steps_per_year=250))
    k = sample.jumps.astype(float)
    mean, se, _ = mc.estimate(k, sample)
    assert abs(mean - 3.0) < 4 * se
    assert sample.meta["mean_jumps"] == pytest.approx(k.mean())


def test_bm_histogram_against_gaussian():
    edges = np.linspace(-3, 3, 41)
    h = mc.simulate_density_cell(make_bm_auxiliary([0.0], [[1.0]]), 1.0, [0.0], edges,
                                 mc.MCConfig(paths=200_000, steps_per_year=1))
    exact = np.diff(stats.norm.cdf(edges)) / np.diff(edges)
    assert np.max(np.abs(h.density - exact)) < 4 * np.max(h.std_error)
    assert h.mass <= 1.0 and h.mass == pytest.approx(stats.norm.cdf(3) - stats.norm.cdf(-3), abs=3e-3)
    assert h.paths == 200_000


def test_histogram_mass_and_empty_bins():
    h = mc.simulate_density_cell(make_bm_auxiliary([0.0], [[1.0]]), 1.0, [0.0], [5.0, 6.0, 7.0],
                                 mc.MCConfig(paths=2000, steps_per_year=1))
    assert np.all(h.density == 0.0) and np.all(h.std_error == 0.0) and h.mass == 0.0


def test_ou_mode_bin():
    kappa, alpha, sig = 1.0, 0.0, 0.5
    t = 5.0
    mean = 1.0 * math.exp(-kappa * t)
    edges = np.linspace(-1.5, 1.5, 31)
    h = mc.simulate_density_cell(make_ou(kappa, alpha, sig), t, [1.0], edges,
                                 mc.MCConfig(paths=100_000, steps_per_year=50))
    centers = h.centers[0]
    assert np.argmax(h.density) == np.argmin(np.abs(centers - mean))


def test_two_dimensional_histogram():
    h = mc.simulate_density_cell(make_bm_auxiliary([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]), 1.0, [0.0, 0.0],
                                 [np.linspace(-4, 4, 9), np.linspace(-4, 4, 9)], mc.MCConfig(paths=20_000))
    assert h.density.shape == (8, 8)
    assert float(np.sum(h.density) * 1.0) == pytest.approx(h.mass)


def test_grid_shares_paths_across_log_price():
    m = build_catalog_model("logvol")
    f = sx.positive_part(sx.sub(sx.exp(x0), sx.const(100.0)))
    X = np.array([[math.log(95.0), math.log(105.0)], [-3.0, -3.0]])
    cfg = mc.MCConfig(paths=4000, steps_per_year=100)
    grid = mc.simulate_moment_grid(m, f, 1 / 12, X, cfg)
    single = mc.simulate_moment(m, f, 1 / 12, X[:, 1], cfg)
    assert grid[0].meta["shared_paths"]
    assert grid[1].mean == pytest.approx(single.mean, rel=1e-12)


def test_errors():
    m = build_catalog_model("sqr")
    with pytest.raises(mc.MCError):
        mc.simulate_moment(m, x0, 0.0, [4.6, 0.04], mc.MCConfig(paths=10))
    with pytest.raises(mc.MCError):
        mc.simulate_moment(m, x0, 0.1, [4.6, -0.01], mc.MCConfig(paths=10))
    with pytest.raises(mc.MCError):
        mc.simulate_moment(m, x0, 0.1, [4.6], mc.MCConfig(paths=10))
    with pytest.raises(mc.MCError):
        mc.MCConfig(paths=0)
    with pytest.raises(mc.MCError):
        mc.MCConfig(seed=-1)
    with pytest.raises(mc.MCError):
        mc.MCConfig(steps_per_year=10**7).n_steps(2.0)
    with pytest.raises(mc.MCError):
        mc.simulate_density_cell(make_ou(1, 0, 0.5), 1.0, [0.0], [1.0, 0.0], mc.MCConfig(paths=10))
