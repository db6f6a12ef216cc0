"""Gauss rules (Golub-Welsch) and jump-integral discretizations."""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal


class QuadratureError(ValueError):
    pass


def _gauss_from_recurrence(n, alpha, beta, mu0):
    """Nodes/weights of the n-point Gauss rule for monic recurrence coefficients.

    alpha(k), beta(k) give p_{k+1} = (x - alpha_k) p_k - beta_k p_{k-1}; mu0 is the
    total mass of the weight.  Nodes are the Jacobi-matrix eigenvalues, polished by
    Newton steps; weights come from the Christoffel sum 1/sum_k q_k(x)^2 over the
    orthonormal polynomials, which keeps tiny tail weights accurate.
    """
    a = np.array([alpha(k) for k in range(n)], dtype=float)
    b = np.sqrt(np.array([beta(k) for k in range(1, n)], dtype=float))
    if n == 1:
        x = a.copy()
    else:
        try:
            x = eigh_tridiagonal(a, b, eigvals_only=True)
        except np.linalg.LinAlgError as exc:  # pragma: no cover
            raise QuadratureError(f"eigen-solve failed for n={n}") from exc
    bn = math.sqrt(beta(n))
    for _ in range(2):
        q_prev, q = np.zeros_like(x), np.full_like(x, 1.0 / math.sqrt(mu0))
        dq_prev, dq = np.zeros_like(x), np.zeros_like(x)
        for k in range(n):
            bk = math.sqrt(beta(k)) if k else 0.0
            bk1 = bn if k == n - 1 else b[k]
            q_next = ((x - a[k]) * q - bk * q_prev) / bk1
            dq_next = (q + (x - a[k]) * dq - bk * dq_prev) / bk1
            q_prev, q, dq_prev, dq = q, q_next, dq, dq_next
        step = np.where(dq != 0.0, q / np.where(dq != 0.0, dq, 1.0), 0.0)
        x = x - step
    acc = np.zeros_like(x)
    q_prev, q = np.zeros_like(x), np.full_like(x, 1.0 / math.sqrt(mu0))
    for k in range(n):
        acc += q * q
        if k < n - 1:
            bk = math.sqrt(beta(k)) if k else 0.0
            q_prev, q = q, ((x - a[k]) * q - bk * q_prev) / b[k]
    return x, 1.0 / acc


def gauss_hermite(n):
    """n-point rule for the weight exp(-xi^2) on the real line."""
    if not 1 <= n <= 100:
        raise QuadratureError("gauss_hermite needs 1 <= n <= 100")
    x, w = _gauss_from_recurrence(n, lambda k: 0.0, lambda k: k / 2.0, math.sqrt(math.pi))
    # exact symmetry about zero
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    return x, w


def gauss_laguerre(n):
    """n-point rule for the weight exp(-c) on [0, inf)."""
    if not 1 <= n <= 100:
        raise QuadratureError("gauss_laguerre needs 1 <= n <= 100")
    return _gauss_from_recurrence(n, lambda k: 2.0 * k + 1.0, lambda k: float(k * k), 1.0)


def hermite_moment(k):
    """int xi^k exp(-xi^2) dxi by recurrence."""
    if k % 2:
        return 0.0
    m = math.sqrt(math.pi)
    for j in range(2, k + 1, 2):
        m *= (j - 1) / 2.0
    return m


def laguerre_moment(k):
    """int c^k exp(-c) dc = k! by recurrence."""
    m = 1.0
    for j in range(1, k + 1):
        m *= j
    return m


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Nodes c_s (rows, one column per state coordinate) and weights w_s."""

    nodes: np.ndarray
    weights: np.ndarray
    provenance: str = "custom"
    key: str = field(init=False, repr=False)
    shift_mask: int = field(init=False, repr=False)

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if nodes.shape[0] != weights.shape[0] or weights.size == 0:
            raise QuadratureError("rule needs matching, nonempty nodes and weights")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        h = hashlib.blake2b(digest_size=16)
        h.update(str(nodes.shape).encode())
        h.update(nodes.tobytes())
        h.update(weights.tobytes())
        object.__setattr__(self, "key", h.hexdigest())
        m = 0
        for i in range(nodes.shape[1]):
            if np.any(nodes[:, i] != 0.0):
                m |= 1 << i
        object.__setattr__(self, "shift_mask", m)

    @property
    def S(self):
        return int(self.weights.size)

    @property
    def dim(self):
        return int(self.nodes.shape[1])

    def total_weight(self):
        return math.fsum(self.weights)

    def expectation(self, g):
        """sum_s w_s g(c_s) for a vectorized g taking an (S, d) array."""
        return float(np.dot(self.weights, g(self.nodes)))

    def to_dict(self):
        return {"provenance": self.provenance, "nodes": self.nodes.tolist(), "weights": self.weights.tolist()}


def _marginal_rule(marg, n):
    kind = marg.kind
    if kind == "normal":
        xi, w = gauss_hermite(n)
        return marg.mean + math.sqrt(2.0) * marg.sd * xi, w / math.sqrt(math.pi)
    if kind == "double_exponential":
        c, w = gauss_laguerre(n)
        return np.concatenate([-marg.scale * c[::-1], marg.scale * c]), np.concatenate([w[::-1], w]) / 2.0
    if kind == "exponential":
        c, w = gauss_laguerre(n)
        return marg.mean * c, w
    raise QuadratureError(f"unsupported jump distribution {kind!r}")


def _tensor(dist, per_coord, provenance):
    coords = [c for c, _ in dist.marginals]
    d = dist.dim
    pts, wts = [], []
    for combo in itertools.product(*[range(len(per_coord[i][1])) for i in range(len(coords))]):
        c = np.zeros(d)
        w = 1.0
        for j, idx in enumerate(combo):
            c[coords[j]] = per_coord[j][0][idx]
            w *= per_coord[j][1][idx]
        pts.append(c)
        wts.append(w)
    return QuadratureRule(np.array(pts), np.array(wts), provenance)


def jump_rule(dist, n):
    """Gauss rule for the jump-size law; tensor product across jumping coordinates."""
    if n < 1:
        raise QuadratureError("n must be >= 1")
    per = [_marginal_rule(m, n) for _, m in dist.marginals]
    fam = "+".join("gauss_hermite" if m.kind == "normal" else "gauss_laguerre" for _, m in dist.marginals)
    return _tensor(dist, per, f"{fam}({n})")


def monte_carlo_rule(dist, S, seed):
    """S i.i.d. draws from the jump law with weights 1/S."""
    if S < 1:
        raise QuadratureError("S must be >= 1")
    rng = np.random.default_rng(seed)
    nodes = np.zeros((S, dist.dim))
    for coord, m in dist.marginals:
        nodes[:, coord] = m.sample(rng, S)
    return QuadratureRule(nodes, np.full(S, 1.0 / S), f"monte_carlo({S},{seed})")


def convolution_rule(dist, k, n):
    """Rule for the k-fold convolution of a normal jump law (k >= 1)."""
    per = []
    for _, m in dist.marginals:
        if m.kind != "normal":
            raise QuadratureError(f"no closed-form convolution for {m.kind!r} jumps")
        xi, w = gauss_hermite(n)
        per.append((k * m.mean + math.sqrt(2.0 * k) * m.sd * xi, w / math.sqrt(math.pi)))
    return _tensor(dist, per, f"gauss_hermite({n})*conv{k}")
