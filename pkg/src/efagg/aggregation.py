"""Context aggregation: mean pooling, Bayesian, mixture and robust aggregation.

The ``*_batched`` functions are the working core. They take per-point factor
moments ``m, v`` of shape ``(P, D)`` stacked over many tasks, plus a constant
0/1 segment matrix ``seg`` of shape ``(B, P)`` assigning points to tasks.
Every per-task sum is ``seg @ x``, which keeps the whole computation
differentiable with the autodiff tensors and permutation invariant up to
floating-point reassociation. The single-task functions wrap the core with a
one-row segment matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special

from . import autodiff as ad
from .ef_core import (
    LOG_2PI,
    DiagGaussian,
    DimensionError,
    GammaDist,
    GaussianMixture,
    floor_var,
)


@dataclass(frozen=True)
class FactorSet:
    """Per-point Gaussian factor moments ``(m_i, V_i)`` of one context set."""

    means: np.ndarray
    vars: np.ndarray

    def __post_init__(self):
        if ad.is_tensor(self.means) or ad.is_tensor(self.vars):
            return
        m = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.vars, dtype=np.float64)
        if m.ndim == 1:
            m = m[:, None]
        if v.ndim == 1:
            v = v[:, None]
        if m.shape != v.shape:
            raise DimensionError(f"means {m.shape} and vars {v.shape} differ")
        if np.any(v <= 0):
            raise ValueError("factor variances must be strictly positive")
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "vars", v)

    def __len__(self) -> int:
        return ad.as_array(self.means).shape[0]

    @property
    def dim(self) -> int:
        return ad.as_array(self.means).shape[-1]

    @classmethod
    def empty(cls, dim: int) -> "FactorSet":
        return cls(np.zeros((0, dim)), np.ones((0, dim)))

    def segment(self) -> np.ndarray:
        return np.ones((1, len(self)))


@dataclass(frozen=True)
class RobustPrior:
    """Hyperparameters of the Gamma priors over the latent and factor precisions."""

    a0: float
    b0: float
    c0: float

    def __post_init__(self):
        if min(self.a0, self.b0, self.c0) <= 0:
            raise ValueError("a0, b0 and c0 must be positive")

    @classmethod
    def scaled(cls, dim: int) -> "RobustPrior":
        """Defaults scaled by latent dimension: a0 = b0 = 1e-6 D, c0 = 1e-2 D."""
        return cls(1e-6 * dim, 1e-6 * dim, 1e-2 * dim)


@dataclass
class RobustState:
    z_post: DiagGaussian
    alpha_post: GammaDist
    beta_posts: list
    elbo_trace: list = field(default_factory=list)


@dataclass(frozen=True)
class AggregateResult:
    posterior: object
    diagnostics: Optional[object] = None


def segment_matrix(counts: Sequence[int], total: Optional[int] = None, offsets=None) -> np.ndarray:
    """0/1 matrix mapping consecutive blocks of points to tasks."""
    counts = list(counts)
    if offsets is None:
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(int)
    total = int(np.sum(counts)) if total is None else total
    seg = np.zeros((len(counts), total))
    for b, (o, n) in enumerate(zip(offsets, counts)):
        seg[b, o : o + n] = 1.0
    return seg


def _check_dims(factors: FactorSet, dim: int) -> None:
    if factors.dim != dim:
        raise DimensionError(f"factors have dimension {factors.dim}, prior {dim}")


# -- mean pooling ------------------------------------------------------------------
def mean_pool(encodings):
    """Arithmetic mean of per-point encodings.

    Plain arrays are summed with ``math.fsum`` per coordinate: the result is
    correctly rounded and therefore bit-identical under any permutation.
    """
    if ad.is_tensor(encodings):
        if encodings.shape[0] == 0:
            raise ValueError("mean pooling of an empty set is undefined")
        return ad.mean(encodings, axis=0)
    enc = np.asarray(encodings, dtype=np.float64)
    if enc.ndim == 1:
        enc = enc[:, None]
    if enc.shape[0] == 0:
        raise ValueError("mean pooling of an empty set is undefined")
    return np.array([math.fsum(col) for col in enc.T]) / enc.shape[0]


# -- Bayesian aggregation ---------------------------------------------------------
def ba_batched(m, v, seg, prior_mean, prior_var):
    """Gaussian posterior per task: precisions and precision-weighted means add."""
    prec = ad.matmul(seg, 1.0 / v) + 1.0 / prior_var
    var = floor_var(1.0 / prec)
    mean = var * (ad.matmul(seg, m / v) + prior_mean / prior_var)
    return mean, var


def ba_incremental_batched(m, v, seg, prior_mean, prior_var):
    """Same posterior in the form ``mu0 + var * sum((r_i - mu0) / sigma_i^2)``."""
    var = 1.0 / (1.0 / prior_var + ad.matmul(seg, 1.0 / v))
    mean = prior_mean + var * (ad.matmul(seg, m / v) - ad.matmul(seg, 1.0 / v) * prior_mean)
    return mean, var


def log_normalizer_batched(m, v, seg, prior_mean, prior_var, post_mean, post_var):
    """``log int prod_i N(z|m_i,V_i) N(z|mu0,Sigma0) dz`` for each task.

    Prior and posterior arrays may carry an extra mixture axis before ``D``;
    per-task sums are then broadcast across it.
    """
    n = seg.sum(axis=1, keepdims=True)
    per_point = ad.sum(ad.log(v) + m * m / v, axis=-1, keepdims=True)
    s_points = ad.matmul(seg, per_point)  # (B, 1)
    dim = ad.as_array(v).shape[-1]
    extra = ad.as_array(post_mean).ndim - 2
    if extra:
        n = n.reshape(n.shape + (1,) * extra)
        s_points = ad.reshape(s_points, ad.as_array(s_points).shape + (1,) * extra)
    prior_term = ad.sum(ad.log(prior_var) + prior_mean * prior_mean / prior_var, axis=-1, keepdims=True)
    post_term = ad.sum(ad.log(post_var) + post_mean * post_mean / post_var, axis=-1, keepdims=True)
    out = -0.5 * (n * dim * LOG_2PI + s_points + prior_term - post_term)
    return out[..., 0]


def bayesian_aggregate(factors: FactorSet, prior: DiagGaussian) -> DiagGaussian:
    _check_dims(factors, prior.dim)
    mean, var = ba_batched(factors.means, factors.vars, factors.segment(), prior.mean, prior.var)
    return DiagGaussian(mean[0], var[0])


def aggregate_log_z(factors: FactorSet, prior: DiagGaussian):
    _check_dims(factors, prior.dim)
    seg = factors.segment()
    mean, var = ba_batched(factors.means, factors.vars, seg, prior.mean, prior.var)
    return log_normalizer_batched(factors.means, factors.vars, seg, prior.mean, prior.var, mean, var)[0]


# -- mixture Bayesian aggregation -------------------------------------------------
def mba_batched(m, v, seg, prior_log_w, prior_means, prior_vars):
    """Mixture posterior per task.

    ``prior_means, prior_vars`` have shape ``(K, D)``; outputs are posterior
    log-weights ``(B, K)``, component means and variances ``(B, K, D)`` and the
    per-component log normalizers ``(B, K)``.
    """
    s_prec = ad.matmul(seg, 1.0 / v)
    s_mp = ad.matmul(seg, m / v)
    bsz, dim = ad.as_array(s_prec).shape
    s_prec = ad.reshape(s_prec, (bsz, 1, dim))
    s_mp = ad.reshape(s_mp, (bsz, 1, dim))
    prec = s_prec + 1.0 / prior_vars
    var = floor_var(1.0 / prec)
    mean = var * (s_mp + prior_means / prior_vars)
    log_c = log_normalizer_batched(m, v, seg, prior_means, prior_vars, mean, var)
    unnorm = log_c + prior_log_w
    log_w = unnorm - ad.logsumexp(unnorm, axis=-1, keepdims=True)
    return log_w, mean, var, log_c


def mixture_aggregate(factors: FactorSet, prior: GaussianMixture) -> AggregateResult:
    """Posterior mixture; diagnostics are the per-component ``log C_k``."""
    _check_dims(factors, prior.dim)
    means = np.stack([c.mean for c in prior.components])
    vars_ = np.stack([c.var for c in prior.components])
    log_w, mean, var, log_c = mba_batched(
        factors.means, factors.vars, factors.segment(), np.log(prior.weights), means, vars_
    )
    comps = [DiagGaussian(mean[0, k], var[0, k]) for k in range(len(prior.components))]
    return AggregateResult(GaussianMixture.from_log_weights(log_w[0], comps), log_c[0])


def mixture_log_density_batched(z, log_w, means, vars_):
    """``log sum_k w_k N(z | mu_k, Sigma_k)`` with ``z`` shaped ``(..., B, D)``."""
    zk = ad.reshape(z, ad.as_array(z).shape[:-1] + (1, ad.as_array(z).shape[-1]))
    comp = -0.5 * ad.sum(LOG_2PI + ad.log(vars_) + (zk - means) ** 2 / vars_, axis=-1)
    return ad.logsumexp(comp + log_w, axis=-1)


# -- robust Bayesian aggregation ----------------------------------------------------
def rba_batched(m, v, seg, prior: RobustPrior, steps: int, record_elbo: bool = False):
    """Unrolled mean-field coordinate ascent for the Student-t factor model.

    Returns a dict with the posterior over z (``mean``, ``var``), the Gamma
    posteriors (``a``, ``b`` per task, ``c`` shared, ``d`` per point) and, when
    ``record_elbo`` is set, the evidence bound after each sweep ``(B, steps)``.
    Every operation goes through :mod:`autodiff`, so gradients flow through
    all sweeps.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    # the hyperparameters may be tensors when they are learned; the bound is
    # only ever reported, so it takes plain floats
    fixed = RobustPrior(*(float(ad.as_array(h)) for h in (prior.a0, prior.b0, prior.c0)))
    dim = ad.as_array(m).shape[-1]
    bsz = seg.shape[0]
    n_pts = seg.shape[1]
    seg_t = seg.T
    inv_v = 1.0 / v
    m_inv_v = m * inv_v
    m_quad = ad.sum(m * m_inv_v, axis=-1, keepdims=True)
    e_alpha = np.ones((bsz, 1))
    e_beta = np.ones((n_pts, 1))
    a = b = np.ones((bsz, 1))
    c = 1.0
    d = np.ones((n_pts, 1))
    trace = []
    for _ in range(steps):
        prec = ad.matmul(seg, e_beta * inv_v) + e_alpha
        var = floor_var(1.0 / prec)
        mean = var * ad.matmul(seg, e_beta * m_inv_v)
        a = prior.a0 + 0.5 * dim
        b = prior.b0 + 0.5 * ad.sum(mean * mean + var, axis=-1, keepdims=True)
        c = prior.c0 + 0.5 * dim
        mean_i = ad.matmul(seg_t, mean)
        second_i = ad.matmul(seg_t, mean * mean + var)
        d = prior.c0 + 0.5 * (
            m_quad
            - 2.0 * ad.sum(m_inv_v * mean_i, axis=-1, keepdims=True)
            + ad.sum(second_i * inv_v, axis=-1, keepdims=True)
        )
        e_alpha = a / b
        e_beta = c / d
        if record_elbo:
            trace.append(
                rba_elbo_batched(
                    ad.as_array(m), ad.as_array(v), seg, fixed,
                    ad.as_array(mean), ad.as_array(var),
                    np.broadcast_to(ad.as_array(a), (bsz, 1)), ad.as_array(b), c, ad.as_array(d),
                )
            )
    out = {"mean": mean, "var": var, "a": a, "b": b, "c": c, "d": d}
    if record_elbo:
        out["elbo"] = np.stack(trace, axis=1)
    return out


def rba_elbo_batched(m, v, seg, prior: RobustPrior, mean, var, a, b, c, d):
    """Evidence bound of the robust model under the mean-field posterior.

    Expected log joint (factors with precision-scaled covariances, z prior,
    Gamma priors) plus the entropies of all mean-field factors, per task.
    """
    dim = m.shape[-1]
    a = np.asarray(a, dtype=np.float64)
    e_alpha = a / b
    e_log_alpha = special.digamma(a) - np.log(b)
    e_beta = c / d
    e_log_beta = special.digamma(c) - np.log(d)
    mean_i = seg.T @ mean
    var_i = seg.T @ var
    quad = np.sum(((mean_i - m) ** 2 + var_i) / v, axis=-1, keepdims=True)
    factor = (
        -0.5 * dim * LOG_2PI
        + 0.5 * dim * e_log_beta
        - 0.5 * np.sum(np.log(v), axis=-1, keepdims=True)
        - 0.5 * e_beta * quad
    )
    z_prior = -0.5 * dim * LOG_2PI + 0.5 * dim * e_log_alpha - 0.5 * e_alpha * np.sum(
        mean**2 + var, axis=-1, keepdims=True
    )
    alpha_prior = (
        prior.a0 * np.log(prior.b0) - special.gammaln(prior.a0)
        + (prior.a0 - 1.0) * e_log_alpha - prior.b0 * e_alpha
    )
    beta_prior = (
        prior.c0 * np.log(prior.c0) - special.gammaln(prior.c0)
        + (prior.c0 - 1.0) * e_log_beta - prior.c0 * e_beta
    )
    h_z = 0.5 * np.sum(1.0 + LOG_2PI + np.log(var), axis=-1, keepdims=True)
    h_alpha = a - np.log(b) + special.gammaln(a) + (1.0 - a) * special.digamma(a)
    h_beta = c - np.log(d) + special.gammaln(c) + (1.0 - c) * special.digamma(c)
    total = z_prior + alpha_prior + h_z + h_alpha + seg @ (factor + beta_prior + h_beta)
    return total[:, 0]


def robust_aggregate(factors: FactorSet, prior_params: RobustPrior, steps: int) -> RobustState:
    """Robust aggregation of one context set.

    An empty context set yields the one-sweep state with no factor terms.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if isinstance(prior_params, dict):
        prior_params = RobustPrior(**prior_params)
    n = len(factors)
    out = rba_batched(
        factors.means, factors.vars, factors.segment(), prior_params,
        steps if n else 1, record_elbo=not ad.is_tensor(factors.means) and not ad.is_tensor(factors.vars),
    )
    a = out["a"]
    b = out["b"][0, 0]
    d = out["d"]
    betas = [GammaDist(out["c"], d[i, 0]) for i in range(n)]
    return RobustState(
        z_post=DiagGaussian(out["mean"][0], out["var"][0]),
        alpha_post=GammaDist(a, b),
        beta_posts=betas,
        elbo_trace=list(out["elbo"][0]) if "elbo" in out else [],
    )


def evaluate_rba_elbo(state: RobustState, factors: FactorSet, prior_params: RobustPrior) -> float:
    if isinstance(prior_params, dict):
        prior_params = RobustPrior(**prior_params)
    n = len(factors)
    d = np.array([[ad.as_array(g.rate)] for g in state.beta_posts]).reshape(n, 1)
    c = float(ad.as_array(state.beta_posts[0].shape)) if n else prior_params.c0 + 0.5 * factors.dim
    val = rba_elbo_batched(
        ad.as_array(factors.means), ad.as_array(factors.vars), factors.segment(), prior_params,
        ad.as_array(state.z_post.mean)[None], ad.as_array(state.z_post.var)[None],
        np.array([[float(ad.as_array(state.alpha_post.shape))]]),
        np.array([[float(ad.as_array(state.alpha_post.rate))]]),
        c, d,
    )
    return float(val[0])
