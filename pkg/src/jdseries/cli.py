"""Command-line experiment runner: price, density, moment and mc.

Configuration is a JSON file.  The model is a catalog entry
({"catalog": name, "params": {...}}), an inline model spec, or a path to a JSON
file holding either.  See README.md for the full schema.

Exit codes: 2 configuration or parse error, 3 expression budget exceeded,
4 evaluation or simulation failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import expansion as ex
from . import mcbench as mc
from . import symexpr as sx
from .generator import BudgetExceeded, GeneratorError, make_config
from .model import ModelError, bs_call_smoother, build_catalog_model, catalog_defaults, model_from_spec
from .quadrature import QuadratureError

PRICE_HEADER = "model,delta,M,quad_n,S,approx,mc,mc_se,abs_err,pct_err,divergence_onset"
DEFAULT_MATURITIES = [1 / 52, 1 / 12, 1 / 4]
DEFAULT_ORDERS = [1, 2, 3, 4]


class ConfigError(ValueError):
    pass


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def _section(conf, name):
    s = conf.get(name, {})
    if not isinstance(s, dict):
        raise ConfigError(f"'{name}' must be an object")
    return s


def _pos_list(conf, name, default, kind=float):
    v = conf.get(name, default)
    if not isinstance(v, list) or not v:
        raise ConfigError(f"'{name}' must be a nonempty list")
    try:
        out = [kind(a) for a in v]
    except (TypeError, ValueError):
        raise ConfigError(f"'{name}' has a non-numeric entry") from None
    return out


def _grid(spec, name):
    if isinstance(spec, list):
        g = np.array(spec, dtype=float)
    elif isinstance(spec, dict):
        try:
            start, stop = float(spec["start"]), float(spec["stop"])
            if "num" in spec:
                g = np.linspace(start, stop, int(spec["num"]))
            else:
                step = float(spec["step"])
                if step <= 0:
                    raise ConfigError(f"'{name}.step' must be positive")
                g = np.round(start + step * np.arange(int(math.floor((stop - start) / step + 1e-9)) + 1), 12)
        except KeyError as exc:
            raise ConfigError(f"'{name}' is missing {exc}") from None
    else:
        raise ConfigError(f"'{name}' must be a list or a start/stop object")
    if g.size == 0:
        raise ConfigError(f"'{name}' is empty")
    return g


# ---------------------------------------------------------------------------
# configuration


def load_config(path):
    try:
        with open(path) as fh:
            conf = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(conf, dict):
        raise ConfigError("config must be a JSON object")
    conf.setdefault("_base", os.path.dirname(os.path.abspath(path)))
    return conf


def resolve_model(conf):
    """(model, model id, catalog params, start state) from the config."""
    spec = conf.get("model")
    if spec is None:
        raise ConfigError("config has no 'model'")
    if isinstance(spec, str):
        path = spec if os.path.isabs(spec) else os.path.join(conf.get("_base", "."), spec)
        try:
            with open(path) as fh:
                spec = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load model file {path}: {exc}") from None
    if not isinstance(spec, dict):
        raise ConfigError("'model' must be an object or a file path")
    state = conf.get("state", spec.get("state"))
    if "catalog" in spec:
        name = spec["catalog"]
        model = build_catalog_model(name, spec.get("params"))
        entry = catalog_defaults().get(name, {})
        params = dict(entry.get("params", {}))
        params.update(spec.get("params") or {})
        if state is None:
            state = entry.get("state")
    else:
        model = model_from_spec(spec)
        params = dict(spec.get("rates", {}))
    if state is None:
        raise ConfigError("no start 'state' given for the model")
    try:
        state = np.array(state, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError("'state' must be a list of numbers") from None
    if state.shape != (model.dim,):
        raise ConfigError(f"'state' must have {model.dim} entries")
    model_id = conf.get("model_id", model.label)
    return model, model_id, params, state


def apply_overrides(conf, args):
    conf = json.loads(json.dumps(conf))
    m = conf.setdefault("mc", {})
    if not isinstance(m, dict):
        raise ConfigError("'mc' must be an object")
    if args.seed is not None:
        m["seed"] = args.seed
    if args.paths is not None:
        m["paths"] = args.paths
    if args.steps_per_year is not None:
        m["steps_per_year"] = args.steps_per_year
    if args.max_M is not None:
        conf["max_M"] = args.max_M
    if args.quad_n is not None:
        conf["quad_n"] = [args.quad_n]
    return conf


def config_hash(conf):
    clean = {k: v for k, v in conf.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()


def _mc_config(conf, threads, index=0):
    m = _section(conf, "mc")
    seed = int(m.get("seed", 0))
    # one stream family per maturity, derived from the base seed
    sub = int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])
    try:
        return mc.MCConfig(paths=int(m.get("paths", 200_000)), steps_per_year=int(m.get("steps_per_year", 1200)),
                           seed=sub, antithetic=bool(m.get("antithetic", True)), threads=threads)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad 'mc' section: {exc}") from None


def _mc_enabled(conf):
    return bool(_section(conf, "mc").get("enabled", True))


def _orders(conf, key="orders", default=DEFAULT_ORDERS):
    orders = _pos_list(conf, key, default, int)
    cap = int(conf.get("max_M", ex.MAX_ORDER))
    bad = [M for M in orders if M < 0 or M > cap]
    if bad:
        raise ConfigError(f"orders {bad} outside 0..{cap} (raise --max-M to allow more terms)")
    return orders, cap


def _quad_sizes(conf, model):
    if not model.has_jumps:
        return [0]
    sizes = _pos_list(conf, "quad_n", [10], int)
    if any(n < 1 for n in sizes):
        raise ConfigError("'quad_n' entries must be >= 1")
    return sizes


def _check_load(run, conf, n, M):
    """Warn when n^M jump-node evaluations per point exceed the configured budget."""
    budget = float(conf.get("quad_budget", 1e7))
    if n and float(n) ** M > budget:
        run.warnings.append(f"quad_n={n} at M={M} needs {float(n) ** M:.3g} jump evaluations per point "
                            f"(budget {budget:.3g}); expect long run times")


def _gen_config(conf, model, n):
    kw = {}
    if "max_nodes" in conf:
        kw["max_nodes"] = int(conf["max_nodes"])
    return make_config(model, n=n if n else 10, **kw)


def _cached(conf, kind, order, cfg, smoother, build, meta=None):
    cache = conf.get("_cache") or conf.get("cache_dir")
    if not cache:
        return build()
    key = ex.expansion_key(kind, order, cfg, smoother, meta)
    path = os.path.join(cache, f"{key}.json")
    if os.path.exists(path):
        with open(path) as fh:
            return ex.load_expansion(json.load(fh), cfg, smoother)
    res = build()
    os.makedirs(cache, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(res.dumps(), fh)
    os.replace(tmp, path)
    return res


# ---------------------------------------------------------------------------
# commands


class Run:
    """Collected output of one command."""

    def __init__(self, conf):
        self.conf = conf
        self.lines = []
        self.summaries = []
        self.warnings = []

    def csv(self):
        return "".join(line + "\n" for line in self.lines)

    def summary(self):
        return {"config_hash": config_hash(self.conf), "summaries": [_json_safe(s) for s in self.summaries],
                "warnings": self.warnings}


def _json_safe(d):
    # NaN is not valid JSON; missing values become null
    return {k: None if isinstance(v, float) and not math.isfinite(v) else v for k, v in d.items()}


def _smoother(conf, model, params, state, K, pc):
    s = _section(conf, "smoother")
    rate = s.get("rate", params.get("r", 0.0) - params.get("delta", 0.0))
    sigma0 = s.get("sigma0", "auto")
    if sigma0 == "auto":
        v = sx.evaluate(model.diffusion_sq[pc][pc], state)
        if not v > 0:
            raise ConfigError("sigma0 'auto' needs a positive price variance at the start state")
        sigma0 = math.sqrt(v)
    return bs_call_smoother(K, float(rate), float(sigma0), pc)


def cmd_price(conf, threads=1):
    model, mid, params, state = resolve_model(conf)
    K = float(conf.get("strike", 100.0))
    pc = int(conf.get("price_coord", 0))
    S = _grid(conf.get("S_grid", {"start": 90.0, "stop": 110.0, "step": 0.5}), "S_grid")
    if np.any(S <= 0):
        raise ConfigError("'S_grid' must be positive")
    deltas = _pos_list(conf, "maturities", DEFAULT_MATURITIES)
    if any(d <= 0 for d in deltas):
        raise ConfigError("maturities must be positive")
    orders, _ = _orders(conf)
    method = conf.get("method", "smoothed")
    if method not in ("smoothed", "shortcut"):
        raise ConfigError("'method' must be 'smoothed' or 'shortcut'")
    sm = _smoother(conf, model, params, state, K, pc)
    X = np.repeat(state[:, None], S.size, axis=1)
    X[pc] = np.log(S)
    payoff = sx.positive_part(sx.sub(sx.exp(sx.var(pc)), sx.const(K)))
    run = Run(conf)
    run.lines.append(PRICE_HEADER)
    Mtop = max(orders)
    results = {}
    for n in _quad_sizes(conf, model):
        _check_load(run, conf, n, Mtop)
        cfg = _gen_config(conf, model, n)
        if method == "smoothed":
            results[n] = _cached(conf, "smoothed", Mtop, cfg, sm, lambda: ex.expand_smoothed(cfg, sm, Mtop, Mtop))
        else:
            results[n] = ex.expand_jump_shortcut(cfg, sm.expr, Mtop, t_max=max(deltas), quad_n=n or 10,
                                                 max_order=Mtop)
    onset_any = False
    for di, delta in enumerate(deltas):
        if _mc_enabled(conf):
            est = mc.simulate_moment_grid(model, payoff, delta, X, _mc_config(conf, threads, di))
            mcv = np.array([e.mean for e in est])
            mse = np.array([e.std_error for e in est])
        else:
            mcv = mse = np.full(S.size, np.nan)
        for n, res in results.items():
            for M in orders:
                approx, diag = ex.evaluate_expansion(res, x=X, t=delta, M=M)
                err = np.abs(approx - mcv)
                pct = np.where(mcv > 0, err / np.where(mcv > 0, mcv, 1.0), np.nan)
                for p in range(S.size):
                    run.lines.append(",".join(_fmt(v) for v in (
                        mid, delta, M, n, S[p], approx[p], mcv[p], mse[p], err[p], pct[p], int(diag.onset[p]))))
                fired = diag.onset >= 0
                onset_any |= bool(fired.any())
                run.summaries.append({
                    "delta": delta, "M": M, "quad_n": n, "max_abs_err": float(np.max(err)),
                    "max_pct_err": float(np.nanmax(pct)) if np.any(np.isfinite(pct)) else float("nan"),
                    "max_mc_se": float(np.max(mse)), "divergence_points": int(fired.sum())})
    if onset_any:
        run.warnings.append(ex.CAUTION)
    return run


def _density_grid(conf, model, state, delta):
    spec = conf.get("y_grid", "auto")
    width = float(conf.get("grid_width", 6.0))
    num = int(conf.get("grid_num", 121 if model.dim == 1 else 61))
    axes = []
    for i in range(model.dim):
        s = spec[i] if isinstance(spec, list) else spec
        if s == "auto":
            v = sx.evaluate(model.diffusion_sq[i][i], state)
            if not v > 0:
                raise ConfigError(f"automatic y grid needs positive variance in coordinate {i}")
            h = width * math.sqrt(v * delta)
            axes.append(np.linspace(state[i] - h, state[i] + h, num))
        else:
            axes.append(_grid(s, f"y_grid[{i}]"))
    return axes


def _trapz_nd(vals, axes):
    out = vals
    for ax in reversed(axes):
        out = np.trapezoid(out, ax, axis=-1)
    return float(out)


def _aux(conf, model, state):
    a = _section(conf, "aux")
    mu0 = a.get("mu0", "auto")
    s2 = a.get("sigma0_sq", "auto")
    d = model.dim
    if mu0 == "auto":
        mu0 = [sx.evaluate(e, state) for e in model.drift]
    if s2 == "auto":
        s2 = [[sx.evaluate(model.diffusion_sq[i][j], state) for j in range(d)] for i in range(d)]
    return np.array(mu0, dtype=float), np.array(s2, dtype=float)


def cmd_density(conf, threads=1):
    model, mid, params, state = resolve_model(conf)
    deltas = _pos_list(conf, "maturities", DEFAULT_MATURITIES)
    if any(d <= 0 for d in deltas):
        raise ConfigError("maturities must be positive")
    orders, _ = _orders(conf, default=[3])
    n = _quad_sizes(conf, model)[0]
    cfg = _gen_config(conf, model, n)
    run = Run(conf)
    _check_load(run, conf, n, max(orders))
    try:
        aux = _aux(conf, model, state)
        da = ex.density_approx(cfg, aux, max(orders), max(orders))
    except ModelError as exc:
        raise ConfigError(f"auxiliary density: {exc}") from None
    d = model.dim
    run.lines.append(",".join(["model", "delta", "M", "quad_n"] + [f"y{i}" for i in range(d)]
                              + ["approx", "aux_density", "mc_density", "mc_se"]))
    for di, delta in enumerate(deltas):
        axes = _density_grid(conf, model, state, delta)
        mesh = np.meshgrid(*axes, indexing="ij")
        Y = np.array([m.ravel() for m in mesh])
        if _mc_enabled(conf):
            edges = []
            for ax in axes:
                mids = 0.5 * (ax[1:] + ax[:-1])
                edges.append(np.concatenate([[2 * ax[0] - mids[0]], mids, [2 * ax[-1] - mids[-1]]]))
            hist = mc.simulate_density_cell(model, delta, state, edges, _mc_config(conf, threads, di))
            hd, hs = hist.density.ravel(), hist.std_error.ravel()
        else:
            hd = hs = np.full(Y.shape[1], np.nan)
        for M in orders:
            vals, diag = da.evaluate(Y, state, delta, M=M)
            aux_vals = diag.terms[0]
            for p in range(Y.shape[1]):
                run.lines.append(",".join(_fmt(v) for v in [mid, delta, M, n] + list(Y[:, p])
                                          + [vals[p], aux_vals[p], hd[p], hs[p]]))
            grid_vals = vals.reshape(mesh[0].shape)
            run.summaries.append({"delta": delta, "M": M, "normalization": _trapz_nd(grid_vals, axes),
                                  "min_value": float(vals.min()), "negative_points": int((vals < 0).sum()),
                                  "max_abs_mc_diff": float(np.nanmax(np.abs(vals - hd))) if _mc_enabled(conf)
                                  else float("nan")})
            if vals.min() < 0:
                run.warnings.append(f"negative density values at delta={delta!r}, M={M}")
    return run


def cmd_moment(conf, threads=1):
    model, mid, params, state = resolve_model(conf)
    if "f" not in conf:
        raise ConfigError("moment needs an expression 'f'")
    try:
        f = sx.parse(str(conf["f"]), {nm: sx.var(i) for i, nm in enumerate(model.names)})
    except sx.ExprError as exc:
        raise ConfigError(f"cannot parse 'f': {exc}") from None
    if sx.params_of(f):
        raise ConfigError(f"'f' uses unknown names {sorted(sx.params_of(f))}")
    times = _pos_list(conf, "times", [0.1])
    if any(t < 0 for t in times):
        raise ConfigError("'times' must be nonnegative")
    orders, cap = _orders(conf, default=[ex.DEFAULT_ORDER])
    run = Run(conf)
    run.lines.append("model,t,M,quad_n,value,exact,abs_diff,divergence_onset")
    for n in _quad_sizes(conf, model):
        if not f.poly:
            _check_load(run, conf, n, max(orders))
        cfg = _gen_config(conf, model, n)
        res = ex.expand_regular(cfg, f, max(orders), max(orders))
        exact = _poly_exact(cfg, f, model, state, times)
        for t in times:
            for M in orders:
                v, diag = ex.evaluate_expansion(res, x=state, t=t, M=M)
                e = exact.get(t, float("nan"))
                run.lines.append(",".join(_fmt(a) for a in (mid, t, M, n, v, e, abs(v - e), int(diag.onset[0]))))
                run.summaries.append({"t": t, "M": M, "quad_n": n, "value": v, "exact": e,
                                      "divergence_onset": int(diag.onset[0])})
                if diag.onset[0] >= 0 and ex.CAUTION not in run.warnings:
                    run.warnings.append(ex.CAUTION)
    return run


def _poly_exact(cfg, f, model, state, times):
    """Matrix-exponential moments when the model and f are polynomial; {} otherwise."""
    try:
        p = sx.to_polynomial(f, model.dim)
        k = max(1, sx.poly_degree(p))
        pg = ex.poly_generator_matrix(cfg, k)
    except sx.NotPolynomialError:
        return {}
    c = np.zeros(len(pg.basis))
    for alpha, coef in p.items():
        c[pg.index(alpha)] = coef
    return {t: ex.poly_moment(pg, c, t, state) for t in times}


def cmd_mc(conf, threads=1):
    model, mid, params, state = resolve_model(conf)
    deltas = _pos_list(conf, "maturities", DEFAULT_MATURITIES)
    if any(d <= 0 for d in deltas):
        raise ConfigError("maturities must be positive")
    pc = int(conf.get("price_coord", 0))
    names = {nm: sx.var(i) for i, nm in enumerate(model.names)}
    if "f" in conf:
        try:
            f = sx.parse(str(conf["f"]), names)
        except sx.ExprError as exc:
            raise ConfigError(f"cannot parse 'f': {exc}") from None
        S = None
        X = state[:, None]
    else:
        K = float(conf.get("strike", 100.0))
        f = sx.positive_part(sx.sub(sx.exp(sx.var(pc)), sx.const(K)))
        S = _grid(conf.get("S_grid", {"start": 90.0, "stop": 110.0, "step": 0.5}), "S_grid")
        if np.any(S <= 0):
            raise ConfigError("'S_grid' must be positive")
        X = np.repeat(state[:, None], S.size, axis=1)
        X[pc] = np.log(S)
    run = Run(conf)
    run.lines.append("model,delta,S,mc,mc_se,paths,steps")
    for di, delta in enumerate(deltas):
        mcc = _mc_config(conf, threads, di)
        est = mc.simulate_moment_grid(model, f, delta, X, mcc)
        for p, e in enumerate(est):
            s_val = S[p] if S is not None else float("nan")
            run.lines.append(",".join(_fmt(v) for v in (mid, delta, s_val, e.mean, e.std_error, e.paths_used,
                                                      e.meta["steps"])))
        run.summaries.append({"delta": delta, "points": len(est), "max_mc_se": max(e.std_error for e in est),
                              "mean_jumps": est[0].meta["mean_jumps"]})
    return run


COMMANDS = {"price": cmd_price, "density": cmd_density, "moment": cmd_moment, "mc": cmd_mc}


def build_parser():
    p = argparse.ArgumentParser(prog="jdseries", description="Series expansions for jump-diffusion expectations.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--out", help="CSV output path (summary goes to <stem>.summary.json); default stdout")
        s.add_argument("--summary", help="path for the JSON summary")
        s.add_argument("--seed", type=int)
        s.add_argument("--paths", type=int)
        s.add_argument("--steps-per-year", type=int, dest="steps_per_year")
        s.add_argument("--max-M", type=int, dest="max_M")
        s.add_argument("--quad-n", type=int, dest="quad_n")
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--cache", help="directory for cached expansions")
    return p


def _write(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def main(argv=None):
    args = build_parser().parse_args(argv)
    err = sys.stderr
    try:
        conf = apply_overrides(load_config(args.config), args)
        if args.cache:
            conf["_cache"] = args.cache
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cpath = os.path.abspath(args.config)
        targets = [args.out, args.summary] + ([os.path.splitext(args.out)[0] + ".summary.json"] if args.out else [])
        if any(p and os.path.abspath(p) == cpath for p in targets):
            raise ConfigError("output would overwrite the config file")
        run = COMMANDS[args.command](conf, threads=args.threads)
    except (ConfigError, ModelError, sx.ParseError, QuadratureError, GeneratorError, ex.ExpansionError) as exc:
        print(f"config error: {exc}", file=err)
        return 2
    except BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=err)
        return 3
    except (sx.ExprError, mc.MCError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"evaluation error: {exc}", file=err)
        return 4
    for w in run.warnings:
        print(w, file=err)
    summary = json.dumps(run.summary(), indent=2, sort_keys=True, allow_nan=False) + "\n"
    if args.out:
        _write(args.out, run.csv())
        _write(args.summary or os.path.splitext(args.out)[0] + ".summary.json", summary)
        for s in run.summary()["summaries"]:
            print(json.dumps(s, sort_keys=True, allow_nan=False))
    else:
        sys.stdout.write(run.csv())
        if args.summary:
            _write(args.summary, summary)
        else:
            err.write(summary)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
