"""Euler Monte Carlo benchmark for the catalog models.

Paths are simulated in fixed-size blocks.  Each block draws from its own
Philox stream seeded by (seed, block index), so results do not depend on how
blocks are scheduled across threads.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import symexpr as sx

BLOCK = 10_000
MAX_STEPS = 10_000_000


class MCError(ValueError):
    pass


@dataclass(frozen=True)
class MCConfig:
    paths: int = 200_000
    steps_per_year: int = 1200
    seed: int = 0
    antithetic: bool = True
    threads: int = 1
    block: int = BLOCK

    def __post_init__(self):
        if int(self.paths) < 1 or int(self.steps_per_year) < 1:
            raise MCError("paths and steps_per_year must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise MCError("seed must be a 64-bit unsigned integer")
        if int(self.threads) < 1:
            raise MCError("threads must be >= 1")
        if int(self.block) < 2 or int(self.block) % 2:
            raise MCError("block must be an even integer >= 2")

    def n_steps(self, t):
        n = max(1, math.ceil(t * self.steps_per_year - 1e-9))
        if n > MAX_STEPS:
            raise MCError(f"{n} time steps exceeds the limit {MAX_STEPS}")
        return n

    def block_sizes(self):
        """Paths per block; antithetic runs round the total up to an even count."""
        total = int(self.paths)
        if self.antithetic:
            total += total % 2
        sizes = [self.block] * (total // self.block)
        if total % self.block:
            sizes.append(total % self.block)
        return sizes


@dataclass
class MCEstimate:
    mean: float
    std_error: float
    paths_used: int
    elapsed: float
    meta: dict = field(default_factory=dict)


@dataclass
class TerminalSample:
    """Terminal states (d, P), path discount factors and jump counts.

    With antithetic sampling, path j of a block of size B is paired with path
    j + B/2.  pair_index maps every path to its pair.
    """

    states: np.ndarray
    discount: np.ndarray
    jumps: np.ndarray
    pair_index: np.ndarray
    elapsed: float
    meta: dict


class _Coefficients:
    def __init__(self, model):
        self.model = model
        d = model.dim
        self.d = d
        self.upper = [(i, j) for i in range(d) for j in range(i, d)]
        roots = list(model.drift) + [model.diffusion_sq[i][j] for i, j in self.upper]
        roots.append(model.intensity if model.has_jumps else sx.ZERO)
        roots.append(model.discount)
        self.compiled = sx.compile_exprs(roots)
        self.positive = tuple(model.positive)
        self.has_discount = not model.discount.is_const(0.0)

    def __call__(self, x):
        if self.positive:
            x = x.copy()
            for i in self.positive:
                np.maximum(x[i], 0.0, out=x[i])
        vals = self.compiled(x, 0.0)
        d = self.d
        mu = np.array(vals[:d])
        P = x.shape[1]
        sig = np.empty((d, d, P))
        for k, (i, j) in enumerate(self.upper):
            sig[i, j] = vals[d + k]
            sig[j, i] = vals[d + k]
        lam = np.maximum(vals[-2], 0.0)
        return mu, sig, lam, vals[-1]


def _batched_cholesky(sig):
    """Lower factor of each (d, d) slice of sig (d, d, P); nonpositive pivots give zero columns."""
    d, _, P = sig.shape
    L = np.zeros_like(sig)
    for j in range(d):
        s = sig[j, j] - np.sum(L[j, :j] ** 2, axis=0)
        piv = np.sqrt(np.maximum(s, 0.0))
        L[j, j] = piv
        safe = np.where(piv > 0.0, piv, 1.0)
        for i in range(j + 1, d):
            v = (sig[i, j] - np.sum(L[i, :j] * L[j, :j], axis=0)) / safe
            L[i, j] = np.where(piv > 0.0, v, 0.0)
    return L


def _check_start(model, x):
    x = np.asarray(x, dtype=float).ravel()
    if x.size != model.dim:
        raise MCError(f"start state has {x.size} entries, model dimension is {model.dim}")
    if not np.all(np.isfinite(x)):
        raise MCError("start state must be finite")
    for i in model.positive:
        if x[i] <= 0.0:
            raise MCError(f"start state coordinate {i} must be positive")
    return x


def _simulate_block(coef, model, x0, t, n_steps, size, seed, block_id, antithetic):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(block_id)])))
    d = model.dim
    dt = t / n_steps
    sq = math.sqrt(dt)
    x = np.repeat(x0[:, None], size, axis=1)
    log_disc = np.zeros(size)
    jumps = np.zeros(size, dtype=np.int64)
    half = size // 2
    for _ in range(n_steps):
        mu, sig, lam, r = coef(x)
        if antithetic:
            z = rng.standard_normal((d, half))
            z = np.concatenate([z, -z], axis=1)
        else:
            z = rng.standard_normal((d, size))
        if coef.has_discount:
            log_disc -= r * dt
        L = _batched_cholesky(sig)
        dx = mu * dt + np.einsum("ijp,jp->ip", L, z) * sq
        if model.has_jumps:
            hit = rng.random(size) < np.minimum(lam * dt, 1.0)
            k = int(hit.sum())
            if k:
                for coord, marg in model.jumps.marginals:
                    dx[coord, hit] += marg.sample(rng, k)
                jumps += hit
        x += dx
    return x, np.exp(log_disc), jumps


def simulate_terminal(model, t, x, cfg):
    """Simulate x_t from x; returns a TerminalSample."""
    if not t > 0:
        raise MCError("t must be positive")
    x0 = _check_start(model, x)
    n_steps = cfg.n_steps(t)
    sizes = cfg.block_sizes()
    coef = _Coefficients(model)
    start = time.perf_counter()

    def run(b):
        return _simulate_block(coef, model, x0, t, n_steps, sizes[b], cfg.seed, b, cfg.antithetic)

    if cfg.threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            out = list(pool.map(run, range(len(sizes))))
    else:
        out = [run(b) for b in range(len(sizes))]
    states = np.concatenate([o[0] for o in out], axis=1)
    disc = np.concatenate([o[1] for o in out])
    jumps = np.concatenate([o[2] for o in out])
    pair = []
    offset = 0
    for s in sizes:
        idx = np.arange(s) + offset
        if cfg.antithetic:
            idx = np.concatenate([idx[s // 2:], idx[: s // 2]])
        pair.append(idx)
        offset += s
    meta = {"paths": int(states.shape[1]), "steps": n_steps, "seed": int(cfg.seed), "antithetic": cfg.antithetic,
            "steps_per_year": int(cfg.steps_per_year), "block": int(cfg.block),
            "mean_jumps": float(jumps.mean())}
    return TerminalSample(states, disc, jumps, np.concatenate(pair), time.perf_counter() - start, meta)


def estimate(values, sample):
    """Mean and standard error of per-path values; antithetic pairs count once."""
    v = np.asarray(values, dtype=float)
    if sample.meta["antithetic"]:
        first = np.concatenate(_first_halves(sample))
        u = 0.5 * (v[first] + v[sample.pair_index[first]])
    else:
        u = v
    n = u.size
    if n and np.all(u == u[0]):
        # summation rounding would otherwise leave a spurious ~1e-17 error
        return float(u[0]), 0.0, n
    mean = float(np.mean(u))
    se = float(np.std(u, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, se, n


def _first_halves(sample):
    out = []
    offset = 0
    block = sample.meta["block"]
    total = sample.meta["paths"]
    while offset < total:
        s = min(block, total - offset)
        out.append(np.arange(offset, offset + s // 2))
        offset += s
    return out


def _payoff_values(f, states, t, discount, params=None):
    vals = sx.evaluate_batch(f, states, t, params)
    return vals * discount


def simulate_moment(model, f, t, x, cfg, params=None):
    """Discounted E[f(x_t)] with its standard error."""
    sample = simulate_terminal(model, t, x, cfg)
    start = time.perf_counter()
    v = _payoff_values(sx.as_expr(f), sample.states, t, sample.discount, params)
    mean, se, n = estimate(v, sample)
    meta = dict(sample.meta)
    meta["paths_used"] = sample.meta["paths"]
    return MCEstimate(mean, se, sample.meta["paths"], sample.elapsed + time.perf_counter() - start, meta)


def _translation_coords(model):
    """Coordinates that enter no coefficient: the law of x_t - x_0 does not depend on them."""
    mask = 0
    for e in model.coefficient_exprs():
        mask |= e.mask
    return [i for i in range(model.dim) if not mask >> i & 1]


def simulate_moment_grid(model, f, t, X, cfg, params=None):
    """Estimates at each column of X (d, P).

    Start states that differ only in translation-invariant coordinates (e.g. the
    log-price) share one simulation, shifted per column: common random numbers
    across the grid.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != model.dim:
        raise MCError(f"grid has {X.shape[0]} rows, model dimension is {model.dim}")
    f = sx.as_expr(f)
    free = _translation_coords(model)
    fixed = [i for i in range(model.dim) if i not in free]
    groups = {}
    for p in range(X.shape[1]):
        groups.setdefault(tuple(X[fixed, p]), []).append(p)
    out = [None] * X.shape[1]
    for cols in groups.values():
        base = X[:, cols[0]]
        sample = simulate_terminal(model, t, base, cfg)
        for p in cols:
            states = sample.states
            shift = X[:, p] - base
            if np.any(shift):
                states = states + shift[:, None]
            start = time.perf_counter()
            v = _payoff_values(f, states, t, sample.discount, params)
            mean, se, n = estimate(v, sample)
            meta = dict(sample.meta)
            meta["shared_paths"] = len(cols) > 1
            out[p] = MCEstimate(mean, se, sample.meta["paths"], sample.elapsed + time.perf_counter() - start, meta)
    return out


@dataclass
class DensityHistogram:
    """Per-bin density estimates with multinomial standard errors."""

    edges: list
    density: np.ndarray
    std_error: np.ndarray
    mass: float
    paths: int

    @property
    def centers(self):
        return [0.5 * (e[1:] + e[:-1]) for e in self.edges]


def simulate_density_cell(model, t, x, y_bins, cfg, coords=None):
    """Histogram estimate of p_t(.|x) on the given bin edges.

    y_bins is an edge array (one coordinate) or a sequence of edge arrays, one
    per coordinate in coords (default: the first len(y_bins) coordinates).
    """
    if isinstance(y_bins, np.ndarray) and y_bins.ndim == 1 or (
            len(y_bins) and np.ndim(y_bins[0]) == 0):
        y_bins = [np.asarray(y_bins, dtype=float)]
    edges = [np.asarray(e, dtype=float) for e in y_bins]
    if coords is None:
        coords = list(range(len(edges)))
    if len(coords) != len(edges):
        raise MCError("one edge array is needed per histogram coordinate")
    for e in edges:
        if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
            raise MCError("bin edges must be increasing with at least two entries")
    sample = simulate_terminal(model, t, x, cfg)
    N = sample.meta["paths"]
    counts, _ = np.histogramdd(sample.states[coords].T, bins=edges)
    vol = np.ones_like(counts)
    for k, e in enumerate(edges):
        shape = [1] * len(edges)
        shape[k] = -1
        vol = vol * np.diff(e).reshape(shape)
    p = counts / N
    dens = p / vol
    se = np.sqrt(p * (1.0 - p) / N) / vol
    if len(edges) == 1:
        dens, se = dens.ravel(), se.ravel()
    return DensityHistogram(edges, dens, se, float(p.sum()), N)
