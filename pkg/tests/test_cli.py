import csv
import io
import json
import math

import numpy as np
import pytest
from scipy import stats

from jdseries import cli

GOLDEN = "model,delta,M,quad_n,S,approx,mc,mc_se,abs_err,pct_err,divergence_onset"


def run(tmp_path, command, conf, *extra, name="conf.json"):
    path = tmp_path / name
    path.write_text(json.dumps(conf))
    out = tmp_path / (name + ".csv")
    code = cli.main([command, "--config", str(path), "--out", str(out), *extra])
    text = out.read_text() if code == 0 else None
    summary = json.loads((tmp_path / (name + ".summary.json")).read_text()) if code == 0 else None
    return code, text, summary


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def gbm_conf(**kw):
    conf = {"model": {"catalog": "gbm"}, "maturities": [1 / 12], "orders": [0, 2],
            "S_grid": {"start": 95, "stop": 105, "step": 2.5}, "mc": {"paths": 20_000, "steps_per_year": 240}}
    conf.update(kw)
    return conf


def test_price_header_and_summary(tmp_path):
    code, text, summary = run(tmp_path, "price", gbm_conf())
    assert code == 0
    assert text.splitlines()[0] == GOLDEN == cli.PRICE_HEADER
    rs = rows(text)
    assert len(rs) == 2 * 5
    for s in summary["summaries"]:
        sel = [r for r in rs if int(r["M"]) == s["M"] and float(r["delta"]) == s["delta"]]
        assert max(float(r["abs_err"]) for r in sel) == s["max_abs_err"]
        assert max(float(r["mc_se"]) for r in sel) == s["max_mc_se"]
    for r in rs:
        assert float(r["abs_err"]) == abs(float(r["approx"]) - float(r["mc"]))
        assert float(r["pct_err"]) == pytest.approx(float(r["abs_err"]) / float(r["mc"]), rel=1e-15)
    assert len(summary["config_hash"]) == 64


def test_price_auxiliary_model_is_exact(tmp_path):
    r, sig = 0.03, 0.2
    code, text, _ = run(tmp_path, "price", gbm_conf(orders=[0, 1, 2, 3, 4]))
    assert code == 0
    rs = rows(text)
    for row in rs:
        S, t = float(row["S"]), float(row["delta"])
        d1 = (math.log(S / 100) + (r + 0.5 * sig**2) * t) / (sig * math.sqrt(t))
        # undiscounted expected payoff
        bs = S * math.exp(r * t) * stats.norm.cdf(d1) - 100 * stats.norm.cdf(d1 - sig * math.sqrt(t))
        assert abs(float(row["approx"]) - bs) < 1e-9
        assert int(row["divergence_onset"]) == -1
    assert max(float(x["abs_err"]) for x in rs) < 4 * max(float(x["mc_se"]) for x in rs)


def test_price_deterministic_across_runs_and_threads(tmp_path):
    conf = gbm_conf(model={"catalog": "merton"}, quad_n=[3], orders=[2])
    a = run(tmp_path, "price", conf, name="a.json")[1]
    b = run(tmp_path, "price", conf, name="b.json")[1]
    c = run(tmp_path, "price", conf, "--threads", "2", name="c.json")[1]
    assert a is not None and a == b == c


def test_seed_override_changes_mc(tmp_path):
    a = run(tmp_path, "price", gbm_conf(), name="a.json")[1]
    b = run(tmp_path, "price", gbm_conf(), "--seed", "9", name="b.json")[1]
    assert a is not None and b is not None and a != b
    assert [r["approx"] for r in rows(a)] == [r["approx"] for r in rows(b)]


def test_moment_constant_and_cir(tmp_path):
    code, text, _ = run(tmp_path, "moment", {"model": {"catalog": "sqr"}, "f": "1", "orders": [0, 3],
                                            "times": [0.5]})
    assert code == 0
    assert all(float(r["value"]) == 1.0 for r in rows(text))
    code, text, _ = run(tmp_path, "moment", {"model": {"catalog": "cir"}, "f": "v", "orders": [12],
                                            "times": [0.1], "max_M": 12}, name="cir.json")
    assert code == 0
    (r,) = rows(text)
    kappa, alpha, v0 = 2.0, 0.04, 0.09
    assert float(r["exact"]) == pytest.approx(alpha + (v0 - alpha) * math.exp(-kappa * 0.1), rel=1e-12)
    assert float(r["abs_diff"]) < 1e-8


def test_moment_ou_mean(tmp_path):
    code, text, _ = run(tmp_path, "moment", {"model": {"catalog": "ou"}, "f": "x0", "orders": [8], "times": [0.5]})
    assert code == 0
    assert abs(float(rows(text)[0]["value"]) - math.exp(-0.5)) < 3e-7


def test_caution_on_stderr(tmp_path, capsys):
    code, text, summary = run(tmp_path, "moment", {"model": {"catalog": "ou"}, "f": "x0", "orders": [4],
                                                   "times": [3.0]})
    assert code == 0
    assert int(rows(text)[0]["divergence_onset"]) == 1
    err = capsys.readouterr().err
    assert "caution" in err.lower()
    assert summary["warnings"] and summary["warnings"][0] in err


def test_no_caution_when_terms_shrink(tmp_path, capsys):
    code, _, summary = run(tmp_path, "moment", {"model": {"catalog": "ou"}, "f": "x0", "orders": [4],
                                                "times": [0.2]})
    assert code == 0 and summary["warnings"] == []


def test_density_bm_and_ou(tmp_path):
    conf = {"model": {"catalog": "bm"}, "maturities": [0.5], "orders": [0, 3], "mc": {"enabled": False}}
    code, text, summary = run(tmp_path, "density", conf)
    assert code == 0
    rs = rows(text)
    y = np.array([float(r["y0"]) for r in rs])
    approx = np.array([float(r["approx"]) for r in rs])
    assert np.max(np.abs(approx - stats.norm.pdf(y, 0.0, math.sqrt(0.5)))) < 1e-12
    assert all(s["normalization"] == pytest.approx(1.0, abs=1e-6) for s in summary["summaries"])

    conf = {"model": {"catalog": "ou"}, "state": [0.0], "maturities": [0.1], "orders": [6],
            "aux": {"mu0": [0.0], "sigma0_sq": [[0.25]]}, "mc": {"enabled": False}}
    code, text, _ = run(tmp_path, "density", conf, name="ou.json")
    assert code == 0
    rs = rows(text)
    y = np.array([float(r["y0"]) for r in rs])
    var = 0.25 * (1 - math.exp(-0.2)) / 2
    exact = stats.norm.pdf(y, 0.0, math.sqrt(var))
    assert np.max(np.abs(np.array([float(r["approx"]) for r in rs]) - exact)) < 1e-4


def test_density_with_histogram(tmp_path):
    conf = {"model": {"catalog": "bm"}, "maturities": [1.0], "orders": [1], "grid_num": 21,
            "mc": {"paths": 50_000, "steps_per_year": 1}}
    code, text, summary = run(tmp_path, "density", conf)
    assert code == 0
    rs = rows(text)
    diff = [abs(float(r["approx"]) - float(r["mc_density"])) for r in rs]
    assert max(diff) == summary["summaries"][0]["max_abs_mc_diff"]
    assert max(diff) < 5 * max(float(r["mc_se"]) for r in rs)


def test_mc_command(tmp_path):
    det = {"model": {"dim": 1, "drift": ["0.5"], "diffusion_sq": [["0"]], "label": "det"}, "state": [1.0],
           "f": "x0", "maturities": [1.0], "mc": {"paths": 1000, "steps_per_year": 10}}
    code, text, _ = run(tmp_path, "mc", det)
    assert code == 0
    (r,) = rows(text)
    assert float(r["mc_se"]) == 0.0 and float(r["mc"]) == pytest.approx(1.5, abs=1e-12)
    assert text.splitlines()[0] == "model,delta,S,mc,mc_se,paths,steps"


def test_mc_command_gbm_against_black_scholes(tmp_path):
    spec = {"dim": 1, "names": ["s"], "drift": ["0.03 - 0.02"], "diffusion_sq": [["0.04"]], "discount": "0.03"}
    conf = {"model": spec, "state": [math.log(100)], "maturities": [0.25], "S_grid": [100.0],
            "mc": {"paths": 100_000, "steps_per_year": 400, "seed": 5}}
    code, text, _ = run(tmp_path, "mc", conf)
    assert code == 0
    (r,) = rows(text)
    d1 = (0.03 + 0.02) * 0.25 / (0.2 * 0.5)
    bs = 100 * stats.norm.cdf(d1) - 100 * math.exp(-0.0075) * stats.norm.cdf(d1 - 0.1)
    assert abs(float(r["mc"]) - bs) < 4 * float(r["mc_se"])


def test_exit_codes(tmp_path, capsys):
    assert run(tmp_path, "price", {"maturities": [0.1]})[0] == 2
    assert run(tmp_path, "price", gbm_conf(orders=[9]), name="b.json")[0] == 2
    assert run(tmp_path, "price", gbm_conf(maturities=[-1.0]), name="c.json")[0] == 2
    assert run(tmp_path, "moment", {"model": {"catalog": "nope"}, "f": "x0"}, name="d.json")[0] == 2
    assert cli.main(["price", "--config", str(tmp_path / "missing.json")]) == 2
    budget = {"model": {"catalog": "sqr"}, "f": "exp(v)", "orders": [4], "quad_n": [10], "max_nodes": 50}
    assert run(tmp_path, "moment", budget, name="e.json")[0] == 3
    bad_state = {"model": {"catalog": "sqr"}, "state": [4.6, -0.01], "f": "s", "maturities": [0.1],
                 "mc": {"paths": 10}}
    assert run(tmp_path, "mc", bad_state, name="f.json")[0] == 4
    err = capsys.readouterr().err
    assert "config error" in err and "budget exceeded" in err and "evaluation error" in err


def test_out_never_overwrites_config(tmp_path):
    path = tmp_path / "x.json"
    path.write_text(json.dumps(gbm_conf()))
    before = path.read_text()
    assert cli.main(["price", "--config", str(path), "--out", str(path)]) == 2
    assert path.read_text() == before


def test_stdout_mode(tmp_path, capsys):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"model": {"catalog": "ou"}, "f": "x0", "orders": [1], "times": [0.1]}))
    assert cli.main(["moment", "--config", str(path)]) == 0
    out = capsys.readouterr()
    assert out.out.startswith("model,t,M,quad_n,value,exact,abs_diff,divergence_onset\n")
    assert json.loads(out.err)["summaries"][0]["M"] == 1


def test_cache_reuse(tmp_path):
    conf = gbm_conf(model={"catalog": "merton"}, quad_n=[3], orders=[2], mc={"enabled": False})
    cache = tmp_path / "cache"
    a = run(tmp_path, "price", conf, "--cache", str(cache), name="a.json")[1]
    assert len(list(cache.iterdir())) == 1
    b = run(tmp_path, "price", conf, "--cache", str(cache), name="b.json")[1]
    assert a is not None and a == b


def test_quadrature_load_warning(tmp_path):
    conf = gbm_conf(model={"catalog": "merton"}, quad_n=[3], orders=[2], mc={"enabled": False}, quad_budget=5)
    code, _, summary = run(tmp_path, "price", conf)
    assert code == 0
    assert any("jump evaluations" in w for w in summary["warnings"])


def test_summary_is_strict_json_without_mc(tmp_path):
    code, _, summary = run(tmp_path, "price", gbm_conf(mc={"enabled": False}))
    assert code == 0
    assert summary["summaries"][0]["max_abs_err"] is None
    text = (tmp_path / "conf.json.summary.json").read_text()
    assert "NaN" not in text
