"""Brute-force reference computations used to check the closed-form paths.

Nothing here shares code with :mod:`efagg.aggregation`: posteriors come from
numerical quadrature, gradients from central differences and the robust
coordinate ascent is re-derived with plain Python loops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from .aggregation import FactorSet, RobustPrior, RobustState
from .ef_core import DiagGaussian, GammaDist


class NonConvergentGrid(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadratureGrid:
    """Tensor-product rule over at most two dimensions."""

    bounds: tuple  # ((lo, hi), ...) one pair per dimension
    nodes: int = 200
    rule: str = "gauss-legendre"
    tol: float = 1e-9

    def __post_init__(self):
        if not 1 <= len(self.bounds) <= 2:
            raise ValueError("quadrature is supported for one or two dimensions")
        if self.rule not in ("gauss-legendre", "trapezoid"):
            raise ValueError(f"unknown rule {self.rule!r}")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def refined(self) -> "QuadratureGrid":
        return QuadratureGrid(self.bounds, 2 * self.nodes, self.rule, self.tol)

    def points(self):
        """Return ``(points (M, dim), log_weights (M,))``."""
        axes, logw = [], []
        for lo, hi in self.bounds:
            if self.rule == "gauss-legendre":
                t, w = np.polynomial.legendre.leggauss(self.nodes)
                axes.append(0.5 * (hi - lo) * t + 0.5 * (hi + lo))
                logw.append(np.log(0.5 * (hi - lo) * w))
            else:
                x = np.linspace(lo, hi, self.nodes)
                w = np.full(self.nodes, (hi - lo) / (self.nodes - 1))
                w[[0, -1]] *= 0.5
                axes.append(x)
                logw.append(np.log(w))
        grids = np.meshgrid(*axes, indexing="ij")
        lw = np.meshgrid(*logw, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        return pts, np.sum([w.ravel() for w in lw], axis=0)

    @classmethod
    def around(cls, centers, stds, width: float = 12.0, **kw) -> "QuadratureGrid":
        """Bounds spanning ``center +/- width * std`` for every supplied center."""
        centers = np.atleast_2d(centers)
        stds = np.atleast_2d(stds)
        lo = np.min(centers - width * stds, axis=0)
        hi = np.max(centers + width * stds, axis=0)
        return cls(tuple(zip(lo.tolist(), hi.tolist())), **kw)


def _log_integrate(log_f: Callable, grid: QuadratureGrid):
    pts, logw = grid.points()
    lf = log_f(pts)
    total = special.logsumexp(lf + logw)
    w = np.exp(lf + logw - total)
    mean = w @ pts
    var = w @ (pts - mean) ** 2
    return float(total), mean, var


def factor_log_density(factors: FactorSet) -> Callable:
    """Sum of per-point Gaussian log densities, evaluated at many points."""
    m, v = np.asarray(factors.means), np.asarray(factors.vars)

    def f(z):
        out = np.zeros(len(z))
        for i in range(len(m)):
            out += np.sum(stats.norm.logpdf(z, loc=m[i], scale=np.sqrt(v[i])), axis=1)
        return out

    return f


def gaussian_log_density(mean, var) -> Callable:
    mean, var = np.atleast_1d(mean), np.atleast_1d(var)
    return lambda z: np.sum(stats.norm.logpdf(z, loc=mean, scale=np.sqrt(var)), axis=1)


def mixture_log_density(weights, means, vars_) -> Callable:
    def f(z):
        comps = [math.log(w) + gaussian_log_density(m, v)(z) for w, m, v in zip(weights, means, vars_)]
        return special.logsumexp(np.stack(comps), axis=0)

    return f


def quadrature_posterior(factors: FactorSet, prior_log_density: Callable, grid: QuadratureGrid) -> dict:
    """Normalized moments and log evidence of ``prod_i factor_i(z) * prior(z)``.

    The result is also computed on a grid with twice the nodes; disagreement
    beyond ``grid.tol`` raises :class:`NonConvergentGrid`.
    """
    if factors.dim != grid.dim:
        raise ValueError(f"grid has {grid.dim} dimensions, factors {factors.dim}")
    fac = factor_log_density(factors)

    def log_f(z):
        return fac(z) + prior_log_density(z)

    log_z, mean, var = _log_integrate(log_f, grid)
    log_z2, mean2, var2 = _log_integrate(log_f, grid.refined())
    err = max(abs(log_z - log_z2), np.max(np.abs(mean - mean2)), np.max(np.abs(var - var2)))
    if not err <= grid.tol:
        raise NonConvergentGrid(f"quadrature changed by {err:.3g} on refinement (tol {grid.tol:g})")
    return {"mean": mean2, "var": var2, "log_z": log_z2, "refinement_change": float(err)}


def mixture_mass_ratios(factors: FactorSet, weights, means, vars_, grid: QuadratureGrid) -> np.ndarray:
    """Posterior mixture weights as normalized per-component quadrature masses."""
    fac = factor_log_density(factors)
    logs = []
    for w, m, v in zip(weights, means, vars_):
        comp = gaussian_log_density(m, v)
        lz, _, _ = _log_integrate(lambda z: fac(z) + comp(z), grid)
        logs.append(math.log(w) + lz)
    logs = np.array(logs)
    return np.exp(logs - special.logsumexp(logs))


def finite_diff_grad(f: Callable, x, eps: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + eps e_j) - f(x - eps e_j)) / (2 eps)``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        hi = f(x)
        flat[j] = orig - eps
        lo = f(x)
        flat[j] = orig
        g[j] = (hi - lo) / (2.0 * eps)
    return grad


# -- reference coordinate ascent -----------------------------------------------------
def _reference_bound(m, v, prior, mu, sig, a, b, c, d) -> float:
    dim = len(mu)
    e_alpha = a / b
    e_log_alpha = special.digamma(a) - math.log(b)
    total = 0.0
    # z prior and alpha prior
    ezz = sum(mu[j] ** 2 + sig[j] for j in range(dim))
    total += -0.5 * dim * math.log(2 * math.pi) + 0.5 * dim * e_log_alpha - 0.5 * e_alpha * ezz
    total += prior.a0 * math.log(prior.b0) - math.lgamma(prior.a0) + (prior.a0 - 1) * e_log_alpha - prior.b0 * e_alpha
    for i in range(len(m)):
        e_beta = c / d[i]
        e_log_beta = special.digamma(c) - math.log(d[i])
        quad = sum(((mu[j] - m[i][j]) ** 2 + sig[j]) / v[i][j] for j in range(dim))
        logdet = sum(math.log(v[i][j]) for j in range(dim))
        total += -0.5 * dim * math.log(2 * math.pi) + 0.5 * dim * e_log_beta - 0.5 * logdet - 0.5 * e_beta * quad
        total += prior.c0 * math.log(prior.c0) - math.lgamma(prior.c0) + (prior.c0 - 1) * e_log_beta - prior.c0 * e_beta
        total += c - math.log(d[i]) + math.lgamma(c) + (1 - c) * special.digamma(c)
    total += sum(0.5 * (1 + math.log(2 * math.pi * sig[j])) for j in range(dim))
    total += a - math.log(b) + math.lgamma(a) + (1 - a) * special.digamma(a)
    return float(total)


def reference_cavi(factors: FactorSet, prior_params: RobustPrior, steps: int) -> RobustState:
    """Straight-line coordinate ascent, one scalar at a time."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if isinstance(prior_params, dict):
        prior_params = RobustPrior(**prior_params)
    p = prior_params
    m = np.asarray(factors.means).tolist()
    v = np.asarray(factors.vars).tolist()
    n, dim = len(m), factors.dim
    a = b = c = 1.0
    d = [1.0] * n
    mu = [0.0] * dim
    sig = [1.0] * dim
    trace = []
    for _ in range(steps if n else 1):
        e_alpha = a / b
        e_beta = [c / d[i] for i in range(n)]
        for j in range(dim):
            prec = e_alpha + sum(e_beta[i] / v[i][j] for i in range(n))
            sig[j] = 1.0 / prec
            mu[j] = sig[j] * sum(e_beta[i] * m[i][j] / v[i][j] for i in range(n))
        a = p.a0 + dim / 2.0
        b = p.b0 + 0.5 * sum(mu[j] ** 2 + sig[j] for j in range(dim))
        c = p.c0 + dim / 2.0
        for i in range(n):
            quad = sum(m[i][j] ** 2 / v[i][j] for j in range(dim))
            lin = sum(m[i][j] * mu[j] / v[i][j] for j in range(dim))
            tr = sum((mu[j] ** 2 + sig[j]) / v[i][j] for j in range(dim))
            d[i] = p.c0 + 0.5 * (quad - 2.0 * lin + tr)
        trace.append(_reference_bound(m, v, p, mu, sig, a, b, c, d))
    return RobustState(
        z_post=DiagGaussian(np.array(mu), np.array(sig)),
        alpha_post=GammaDist(a, b),
        beta_posts=[GammaDist(c, d[i]) for i in range(n)],
        elbo_trace=trace,
    )


def robust_log_evidence_quadrature(m: float, v: float, prior: RobustPrior, nodes: int = 400) -> float:
    """``log Z`` of the one-point, one-dimensional robust model.

    The factor precision is integrated out analytically (Student-t with
    ``2 c0`` degrees of freedom); ``(z, log alpha)`` are integrated on a 2-D
    Gauss-Legendre grid.
    """
    nu = 2.0 * prior.c0
    z_half = 60.0 * math.sqrt(v) + abs(m)
    a_mode = math.log(max(prior.a0, 1e-3) / prior.b0)
    grid = QuadratureGrid(((m - z_half, m + z_half), (a_mode - 25.0, a_mode + 25.0)), nodes=nodes)
    pts, logw = grid.points()
    z, u = pts[:, 0], pts[:, 1]
    alpha = np.exp(u)
    log_t = stats.t.logpdf(z, df=nu, loc=m, scale=math.sqrt(v))
    log_prior_z = stats.norm.logpdf(z, loc=0.0, scale=1.0 / np.sqrt(alpha))
    log_gamma = stats.gamma.logpdf(alpha, a=prior.a0, scale=1.0 / prior.b0) + u
    return float(special.logsumexp(log_t + log_prior_z + log_gamma + logw))


def gamma_mc_mean(g: GammaDist, rng: np.random.Generator, n: int = 1_000_000) -> float:
    return float(rng.gamma(g.shape, 1.0 / g.rate, size=n).mean())


def student_t_abs_median(dof: float, rng: np.random.Generator, n: int = 1_000_000) -> float:
    """Median of ``|T|`` from a ratio-of-variates sampler ``N / sqrt(chi2 / dof)``."""
    normal = rng.standard_normal(n)
    chi2 = 2.0 * rng.gamma(dof / 2.0, 1.0, size=n)
    return float(np.median(np.abs(normal / np.sqrt(chi2 / dof))))


def monte_carlo_kl(q: DiagGaussian, p: DiagGaussian, rng: np.random.Generator, n: int = 1_000_000) -> float:
    z = q.mean + np.sqrt(q.var) * rng.standard_normal((n, len(q.mean)))
    lq = gaussian_log_density(q.mean, q.var)(z)
    lp = gaussian_log_density(p.mean, p.var)(z)
    return float(np.mean(lq - lp))


def empirical_covariance_error(k: np.ndarray, draws: np.ndarray) -> float:
    """Relative Frobenius error between an empirical covariance and ``k``."""
    emp = np.cov(draws, rowvar=False, bias=True)
    return float(np.linalg.norm(emp - k) / np.linalg.norm(k))


def sample_kurtosis(x: Sequence[float]) -> float:
    return float(stats.kurtosis(np.asarray(x), fisher=True))
