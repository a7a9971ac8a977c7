"""Oracle checks for every module, runnable from the command line.

Each check returns its worst error over a batch of random instances; a check
passes when that error is within its tolerance (strictly below it for
``strict`` checks). Profiles only change instance counts.
"""
from __future__ import annotations

import csv
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from . import aggregation as agg
from . import autodiff as ad
from . import kernels, oracle
from .aggregation import FactorSet, RobustPrior
from .ef_core import (
    DiagGaussian,
    GammaDist,
    GaussianMixture,
    entropy,
    gamma_expectation,
    kl_diag_gaussian,
    log_prob,
    to_moment,
    to_natural,
)
from .model import ModelConfig, NeuralProcess, pack
from .nn import Adam, Mlp, bounded_sigmoid, bounded_softplus, cosine_lr, load_checkpoint, save_checkpoint
from .taskgen import (
    STUDENT_T_DOF,
    KernelSpec,
    corrupt_batch,
    gram_matrix,
    jittered_cholesky,
    make_batch,
    sample_sizes,
)

PROFILES = {"quick": 20, "full": 100}


@dataclass
class Check:
    name: str
    tol: float
    fn: Callable
    strict: bool = False


@dataclass
class CheckResult:
    name: str
    max_error: float
    tol: float
    passed: bool
    seconds: float
    note: str = ""


REGISTRY: list = []


def check(name: str, tol: float, strict: bool = False):
    def deco(fn):
        REGISTRY.append(Check(name, tol, fn, strict))
        return fn

    return deco


# -- random instances ---------------------------------------------------------------
def random_factors(rng, dim: int, n_max: int = 8, n_min: int = 0) -> FactorSet:
    n = int(rng.integers(n_min, n_max + 1))
    return FactorSet(rng.normal(0.0, 1.5, (n, dim)), rng.uniform(0.2, 3.0, (n, dim)))


def random_prior(rng, dim: int) -> DiagGaussian:
    return DiagGaussian(rng.normal(0.0, 1.0, dim), rng.uniform(0.5, 2.0, dim))


def random_mixture(rng, dim: int, k: int) -> GaussianMixture:
    comps = [DiagGaussian(rng.normal(0.0, 2.0, dim), rng.uniform(0.3, 2.0, dim)) for _ in range(k)]
    return GaussianMixture(rng.dirichlet(np.ones(k)), comps)


def _rel(a, b, floor=1e-300):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _grid_for(mean, var, width=12.0, nodes=200):
    return oracle.QuadratureGrid.around(mean, np.sqrt(var), width=width, nodes=nodes)


def outlier_instance(n_context: int = 5):
    """One-dimensional factors at 0 plus a last one at 10, all with unit variance."""
    m = np.zeros((n_context, 1))
    m[-1] = 10.0
    return FactorSet(m, np.ones((n_context, 1)))


# -- ef_core ------------------------------------------------------------------------
@check("ef_core: natural/moment round trip", 1e-12)
def _(rng, n):
    err = 0.0
    for _ in range(n):
        g = random_prior(rng, 3)
        back = to_moment(to_natural(g))
        err = max(err, _rel(back.mean, g.mean, 1e-12), _rel(back.var, g.var))
    return err


@check("ef_core: KL(q||q) = 0", 1e-12)
def _(rng, n):
    return max(abs(float(kl_diag_gaussian(g, g))) for g in (random_prior(rng, 4) for _ in range(n)))


@check("ef_core: KL against Monte Carlo", 1e-2)
def _(rng, n):
    err = 0.0
    for _ in range(max(2, n // 10)):
        q, p = random_prior(rng, 2), random_prior(rng, 2)
        err = max(err, abs(float(kl_diag_gaussian(q, p)) - oracle.monte_carlo_kl(q, p, rng, 400_000)))
    return err


@check("ef_core: entropy against Monte Carlo", 1e-2)
def _(rng, n):
    err = 0.0
    for _ in range(max(2, n // 10)):
        g = random_prior(rng, 2)
        z = g.mean + np.sqrt(g.var) * rng.standard_normal((400_000, 2))
        err = max(err, abs(float(entropy(g)) + float(np.mean(log_prob(g, z)))))
    return err


@check("ef_core: Gamma mean against Monte Carlo (relative)", 5e-3)
def _(rng, n):
    err = 0.0
    for _ in range(max(2, n // 10)):
        g = GammaDist(rng.uniform(0.5, 5.0), rng.uniform(0.5, 5.0))
        err = max(err, _rel(gamma_expectation(g), oracle.gamma_mc_mean(g, rng, 400_000)))
    return err


@check("ef_core: density integrates to one", 1e-9)
def _(rng, n):
    err = 0.0
    for _ in range(n):
        g = random_prior(rng, 1)
        grid = _grid_for(g.mean, g.var)
        pts, logw = grid.points()
        err = max(err, abs(float(np.sum(np.exp(log_prob(g, pts) + logw))) - 1.0))
    return err


# -- aggregation ----------------------------------------------------------------------
def _ba_quadrature_error(rng, n, dim):
    err = 0.0
    for _ in range(n):
        f, p = random_factors(rng, dim, n_max=6 if dim == 1 else 4), random_prior(rng, dim)
        post = agg.bayesian_aggregate(f, p)
        grid = _grid_for(post.mean, post.var, nodes=120 if dim == 2 else 200)
        q = oracle.quadrature_posterior(f, oracle.gaussian_log_density(p.mean, p.var), grid)
        err = max(err, float(np.max(np.abs(q["mean"] - post.mean))), float(np.max(np.abs(q["var"] - post.var))))
    return err


@check("aggregation: BA moments vs quadrature (D=1)", 1e-6)
def _(rng, n):
    return _ba_quadrature_error(rng, n, 1)


@check("aggregation: BA moments vs quadrature (D=2)", 1e-6)
def _(rng, n):
    return _ba_quadrature_error(rng, max(2, n // 4), 2)


@check("aggregation: log Z vs quadrature (relative)", 1e-5)
def _(rng, n):
    err = 0.0
    for _ in range(n):
        dim = 1 + int(rng.integers(0, 2))
        f, p = random_factors(rng, dim, n_max=4), random_prior(rng, dim)
        post = agg.bayesian_aggregate(f, p)
        grid = _grid_for(post.mean, post.var, nodes=120 if dim == 2 else 200)
        q = oracle.quadrature_posterior(f, oracle.gaussian_log_density(p.mean, p.var), grid)
        err = max(err, _rel(agg.aggregate_log_z(f, p), q["log_z"], 1.0))
    return err


def _mixture_case(rng, dim=1, k=3):
    f, prior = random_factors(rng, dim, n_max=5), random_mixture(rng, dim, k)
    res = agg.mixture_aggregate(f, prior)
    means = np.stack([c.mean for c in res.posterior.components])
    vars_ = np.stack([c.var for c in res.posterior.components])
    grid = oracle.QuadratureGrid.around(means, np.sqrt(vars_), width=12.0, nodes=400)
    return f, prior, res, grid


@check("aggregation: mixture weights vs quadrature mass ratios", 1e-5)
def _(rng, n):
    err = 0.0
    for _ in range(n):
        f, prior, res, grid = _mixture_case(rng)
        comps = prior.components
        ratios = oracle.mixture_mass_ratios(f, prior.weights, [c.mean for c in comps], [c.var for c in comps], grid)
        err = max(err, float(np.max(np.abs(ratios - res.posterior.weights))))
    return err


@check("aggregation: mixture posterior moments vs quadrature", 1e-6)
def _(rng, n):
    err = 0.0
    for _ in range(n):
        f, prior, res, grid = _mixture_case(rng)
        comps = prior.components
        q = oracle.quadrature_posterior(
            f, oracle.mixture_log_density(prior.weights, [c.mean for c in comps], [c.var for c in comps]), grid
        )
        w = res.posterior.weights
        mean = sum(wk * c.mean for wk, c in zip(w, res.posterior.components))
        second = sum(wk * (c.var + c.mean**2) for wk, c in zip(w, res.posterior.components))
        err = max(err, float(np.max(np.abs(q["mean"] - mean))), float(np.max(np.abs(q["var"] - (second - mean**2)))))
    return err


@check("aggregation: mixture with K=1 equals BA", 1e-9)
def _(rng, n):
    err = 0.0
    for _ in range(n):
        dim = int(rng.integers(1, 6))
        f, p = random_factors(rng, dim), random_prior(rng, dim)
        ba = agg.bayesian_aggregate(f, p)
        mix = agg.mixture_aggregate(f, GaussianMixture(np.ones(1), (p,))).posterior
        c = mix.components[0]
        err = max(err, float(np.max(np.abs(c.mean - ba.mean))), float(np.max(np.abs(c.var - ba.var))),
                  abs(float(mix.weights[0]) - 1.0))
    return err


@check("aggregation: one robust sweep from unit init equals BA", 1e-9)
def _(rng, n):
    err = 0.0
    for _ in range(n):
        dim = int(rng.integers(1, 6))
        f = random_factors(rng, dim, n_min=1)
        ba = agg.bayesian_aggregate(f, DiagGaussian.standard(dim))
        st = agg.robust_aggregate(f, RobustPrior.scaled(dim), 1)
        err = max(err, float(np.max(np.abs(st.z_post.mean - ba.mean))), float(np.max(np.abs(st.z_post.var - ba.var))))
    return err


@check("aggregation: flat prior + equal variances reduces to mean pooling", 1e-9)
def _(rng, n):
    err = 0.0
    for _ in range(n):
        dim = int(rng.integers(1, 4))
        k = int(rng.integers(1, 10))
        m = rng.normal(0.0, 2.0, (k, dim))
        v = np.full((k, dim), rng.uniform(0.2, 3.0))
        post = agg.bayesian_aggregate(FactorSet(m, v), DiagGaussian(np.zeros(dim), np.full(dim, 1e15)))
        pooled = agg.mean_pool(m)
        err = max(err, float(np.max(np.abs(post.mean - pooled))))
    return err


@check("aggregation: incremental form equals precision-sum form", 1e-9)
def _(rng, n):
    err = 0.0
    for _ in range(n):
        dim = int(rng.integers(1, 6))
        f, p = random_factors(rng, dim), random_prior(rng, dim)
        seg = f.segment()
        m1, v1 = agg.ba_batched(f.means, f.vars, seg, p.mean, p.var)
        m2, v2 = agg.ba_incremental_batched(f.means, f.vars, seg, p.mean, p.var)
        err = max(err, float(np.max(np.abs(m1 - m2))), float(np.max(np.abs(v1 - v2))))
    return err


def expected_factor_log_density(post: DiagGaussian, m, v):
    """``E_post[log N(z | m_i, V_i)]`` for each row of ``m, v``."""
    return -0.5 * np.sum(np.log(2 * np.pi * v) + ((post.mean - m) ** 2 + post.var) / v, axis=-1)


def appendix_identity_gap(rng, dim: int) -> float:
    """|KL(q_ct || q_c) - (sum_t E[log f_i] - log Z_ct + log Z_c)| for one random instance.

    The expected target log-likelihood is common to both ELBO forms and cancels.
    """
    n_c, n_t = int(rng.integers(0, 8)), int(rng.integers(1, 8))
    m = rng.normal(0.0, 1.5, (n_c + n_t, dim))
    v = rng.uniform(0.2, 3.0, (n_c + n_t, dim))
    prior = DiagGaussian.standard(dim)
    fc, fct = FactorSet(m[:n_c], v[:n_c]), FactorSet(m, v)
    q_c, q_ct = agg.bayesian_aggregate(fc, prior), agg.bayesian_aggregate(fct, prior)
    kl = float(kl_diag_gaussian(q_ct, q_c))
    simplified = (float(np.sum(expected_factor_log_density(q_ct, m[n_c:], v[n_c:])))
                  - float(agg.aggregate_log_z(fct, prior)) + float(agg.aggregate_log_z(fc, prior)))
    return abs(kl - simplified)


@check("aggregation: KL term equals factor-entropy form", 1e-8)
def _(rng, n):
    return max(appendix_identity_gap(rng, int(rng.integers(1, 8))) for _ in range(n))


@check("aggregation: robust bound non-decreasing over 50 sweeps", 1e-6)
def _(rng, n):
    worst = 0.0
    for _ in range(n):
        dim = int(rng.integers(1, 6))
        st = agg.robust_aggregate(random_factors(rng, dim, n_min=1), RobustPrior.scaled(dim), 50)
        worst = max(worst, float(np.max(-np.diff(st.elbo_trace), initial=0.0)))
    return worst


@check("aggregation: robust trajectory matches reference coordinate ascent", 1e-10)
def _(rng, n):
    err = 0.0
    for _ in range(max(2, n // 4)):
        dim = int(rng.integers(1, 5))
        f = random_factors(rng, dim, n_min=1)
        prior = RobustPrior(*rng.uniform(0.05, 2.0, 3))
        for steps in (1, 2, 5, 10):
            a = agg.robust_aggregate(f, prior, steps)
            b = oracle.reference_cavi(f, prior, steps)
            pairs = [
                (a.z_post.mean, b.z_post.mean), (a.z_post.var, b.z_post.var),
                (a.alpha_post.rate, b.alpha_post.rate), (a.alpha_post.shape, b.alpha_post.shape),
                ([g.rate for g in a.beta_posts], [g.rate for g in b.beta_posts]),
                (a.elbo_trace, b.elbo_trace),
            ]
            err = max(err, *(_rel(x, y, 1.0) for x, y in pairs))
    return err


@check("aggregation: outlier gets smaller E[beta] than any inlier (ratio)", 1.0, strict=True)
def _(rng, n):
    st = agg.robust_aggregate(outlier_instance(), RobustPrior.scaled(1), 50)
    e = np.array([float(g.mean()) for g in st.beta_posts])
    return float(e[-1] / e[:-1].min())


@check("aggregation: robust bound below quadrature evidence", 1e-8)
def _(rng, n):
    worst = 0.0
    for _ in range(max(2, n // 4)):
        m, v = float(rng.normal(0, 1.5)), float(rng.uniform(0.2, 2.0))
        prior = RobustPrior(*rng.uniform(0.5, 2.0, 3))
        st = agg.robust_aggregate(FactorSet(np.array([[m]]), np.array([[v]])), prior, 30)
        log_z = oracle.robust_log_evidence_quadrature(m, v, prior)
        worst = max(worst, st.elbo_trace[-1] - log_z)
    return worst


@check("aggregation: permutation invariance (BA, mixture, robust)", 1e-12)
def _(rng, n):
    err = 0.0
    for _ in range(n):
        dim = int(rng.integers(1, 5))
        f = random_factors(rng, dim, n_min=2)
        perm = rng.permutation(len(f))
        g = FactorSet(f.means[perm], f.vars[perm])
        p, mix = random_prior(rng, dim), random_mixture(rng, dim, 2)
        a, b = agg.bayesian_aggregate(f, p), agg.bayesian_aggregate(g, p)
        ma, mb = agg.mixture_aggregate(f, mix).posterior, agg.mixture_aggregate(g, mix).posterior
        ra, rb = agg.robust_aggregate(f, RobustPrior.scaled(dim), 5), agg.robust_aggregate(g, RobustPrior.scaled(dim), 5)
        err = max(err, _rel(a.mean, b.mean, 1.0), _rel(ma.weights, mb.weights, 1.0),
                  _rel(ra.z_post.mean, rb.z_post.mean, 1.0))
    return err


@check("aggregation: duplicated point adds one precision term", 1e-9)
def _(rng, n):
    err = 0.0
    for _ in range(n):
        dim = int(rng.integers(1, 5))
        f, p = random_factors(rng, dim, n_min=1), random_prior(rng, dim)
        dup = FactorSet(np.vstack([f.means, f.means[:1]]), np.vstack([f.vars, f.vars[:1]]))
        prec = 1.0 / agg.bayesian_aggregate(dup, p).var
        expect = 1.0 / agg.bayesian_aggregate(f, p).var + 1.0 / f.vars[0]
        err = max(err, _rel(prec, expect))
    return err


# -- neural ----------------------------------------------------------------------------
def _mlp_loss_case(rng):
    net = Mlp([3, 8, 8, 2], rng, "t")
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=(5, 2))

    def loss():
        return ad.mean((net(x) - y) ** 2)

    return net, loss


@check("neural: autodiff vs finite differences on MLP losses (relative)", 1e-4)
def _(rng, n):
    err = 0.0
    for _ in range(max(2, n // 5)):
        net, loss = _mlp_loss_case(rng)
        out = loss()
        out.backward()
        for name, p in net.params.items():
            def f(val, p=p):
                old = p.data
                p.data = val
                r = float(loss().data)
                p.data = old
                return r

            fd = oracle.finite_diff_grad(f, p.data.copy(), eps=1e-6)
            err = max(err, float(np.max(np.abs(fd - p.grad) / np.maximum(np.abs(fd), 1e-3))))
    return err


@check("neural: bounded transforms respect their floors", 0.0)
def _(rng, n):
    x = np.concatenate([rng.normal(0, 50, 1000), [-1e6, -800.0, 0.0, 800.0]])
    s = bounded_softplus(x, 0.1)
    g = bounded_sigmoid(x, 1e-4)
    return float(max(0.0, 0.1 - s.min(), 1e-4 - g.min(), g.max() - 1.0))


@check("neural: cosine schedule endpoints", 1e-15)
def _(rng, n):
    return max(abs(cosine_lr(5e-4, 0, 100) - 5e-4), abs(cosine_lr(5e-4, 100, 100)), abs(cosine_lr(5e-4, 50, 100) - 2.5e-4))


@check("neural: first Adam step moves each weight by lr", 1e-9)
def _(rng, n):
    p = {"w": ad.Tensor(rng.normal(size=10), requires_grad=True)}
    before = p["w"].data.copy()
    opt = Adam(p, lr=1e-3, horizon=0)
    opt.step({"w": rng.normal(size=10)})
    return float(np.max(np.abs(np.abs(p["w"].data - before) - 1e-3)))


@check("neural: checkpoint round trip is bit exact", 0.0)
def _(rng, n):
    net = Mlp([2, 4, 1], rng, "c")
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(Path(tmp) / "c.npz", net.params, {"note": "x"})
        params, meta, _ = load_checkpoint(path)
    return float(max(np.max(np.abs(params[k] - net.params[k].data)) for k in net.params))


# -- taskgen ----------------------------------------------------------------------------
@check("taskgen: compiled kernels equal numpy fallback", 1e-12)
def _(rng, n):
    if kernels.BACKEND != "compiled":
        return 0.0
    comp, py = kernels.implementation("compiled"), kernels.implementation("python")
    x = rng.uniform(-2, 2, 30)
    err = _rel(kernels.gram_rbf(x, 0.7, 0.3, impl=comp), kernels.gram_rbf(x, 0.7, 0.3, impl=py), 1e-12)
    err = max(err, _rel(kernels.gram_matern52(x, impl=comp), kernels.gram_matern52(x, impl=py), 1e-12))
    offsets = np.array([0, 3, 3, 10])
    m, v = rng.normal(size=(10, 3)), rng.uniform(0.2, 2, (10, 3))
    a = kernels.ba_batch(m, v, offsets, 0.0, 1.0, impl=comp)
    b = kernels.ba_batch(m, v, offsets, 0.0, 1.0, impl=py)
    err = max(err, *(_rel(x1, x2, 1e-12) for x1, x2 in zip(a, b)))
    a = kernels.rba_batch(m, v, offsets, 0.03, 0.03, 0.3, 7, True, impl=comp)
    b = kernels.rba_batch(m, v, offsets, 0.03, 0.03, 0.3, 7, True, impl=py)
    return max(err, *(_rel(x1, x2, 1.0) for x1, x2 in zip(a, b)))


@check("taskgen: jittered Gram matrices factorize (min eigenvalue)", 0.0)
def _(rng, n):
    worst = 0.0
    for _ in range(n):
        x = rng.uniform(-2, 2, 50)
        for spec in (KernelSpec("rbf", rng.uniform(0.1, 1), rng.uniform(0.1, 0.6)), KernelSpec("matern52")):
            chol = jittered_cholesky(gram_matrix(spec, x))
            worst = max(worst, -float(np.min(np.linalg.eigvalsh(chol @ chol.T))))
    return worst


@check("taskgen: GP draws reproduce the kernel covariance (relative Frobenius)", 5e-2)
def _(rng, n):
    x = np.linspace(-2, 2, 8)
    spec = KernelSpec("rbf", 0.8, 0.4)
    chol = jittered_cholesky(gram_matrix(spec, x))
    draws = rng.standard_normal((40_000, 8)) @ chol.T
    return oracle.empirical_covariance_error(gram_matrix(spec, x), draws)


@check("taskgen: |t(2.1)| median against closed form", 1e-2)
def _(rng, n):
    return abs(oracle.student_t_abs_median(STUDENT_T_DOF, rng, 400_000) - stats.t.ppf(0.75, STUDENT_T_DOF))


@check("taskgen: context/target sizes in range", 0.0)
def _(rng, n):
    bad = 0
    for _ in range(50 * n):
        nc, nt = sample_sizes(rng)
        bad += not (3 <= nc <= 47 and 3 <= nt <= 50 - nc)
    return float(bad)


@check("taskgen: corruption leaves targets untouched and is reproducible", 0.0)
def _(rng, n):
    batch = make_batch("matern", 8, 3, 0)
    c1, c2 = corrupt_batch(batch, 0.15, 1), corrupt_batch(batch, 0.15, 1)
    diff = max(float(np.max(np.abs(a.target_y - b.target_y))) for a, b in zip(batch, c1))
    again = max(float(np.max(np.abs(a.context_y - b.context_y))) for a, b in zip(c1, c2))
    return max(diff, again)


# -- np_model ------------------------------------------------------------------------------
def small_model(variant: str, dim: int = 8, seed: int = 0) -> NeuralProcess:
    cfg = ModelConfig(variant, latent_dim=dim, np_hidden=16, ba_hidden=12, dec_hidden=16, cavi_steps=3)
    return NeuralProcess(cfg, seed=seed)


def elbo_gradient_error(variant: str, dim: int, n_params: int, rng, eps: float = 1e-6) -> float:
    """Worst relative gap between autodiff and central differences of the loss."""
    model = small_model(variant, dim, seed=int(rng.integers(1 << 30)))
    packed = pack(make_batch("rbf", 3, int(rng.integers(1 << 30)), 0))
    noise_seed = int(rng.integers(1 << 30))

    def loss_value():
        return model.loss(packed, 2, np.random.default_rng(noise_seed))

    model_loss = loss_value()
    for p in model.params.values():
        p.grad = None
    model_loss.backward()
    names = list(model.params)
    worst = 0.0
    for _ in range(n_params):
        name = names[int(rng.integers(len(names)))]
        p = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.data.shape)
        orig = p.data[idx]
        p.data[idx] = orig + eps
        hi = float(loss_value().data)
        p.data[idx] = orig - eps
        lo = float(loss_value().data)
        p.data[idx] = orig
        fd = (hi - lo) / (2 * eps)
        g = float(p.grad[idx])
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-6))
    return worst


@check("np_model: ELBO gradients vs finite differences, all variants (relative)", 1e-3)
def _(rng, n):
    return max(elbo_gradient_error(v, 8, max(5, n // 4), rng) for v in ("np", "ba", "mba", "rba"))


@check("np_model: predictions invariant to context order, all variants", 1e-9)
def _(rng, n):
    from .training import evaluate
    from .taskgen import Task, TaskBatch

    err = 0.0
    tasks = make_batch("rbf", 4, int(rng.integers(1 << 30)), 0)
    shuffled = []
    for t in tasks:
        perm = rng.permutation(t.n_context)
        shuffled.append(Task(t.context_x[perm], t.context_y[perm], t.target_x, t.target_y))
    for variant in ("np", "ba", "mba", "rba"):
        model = small_model(variant)
        a = evaluate(model, tasks, n_samples=4, seed=0)["per_task"]["pred_ll_target"]
        b = evaluate(model, TaskBatch(tuple(shuffled)), n_samples=4, seed=0)["per_task"]["pred_ll_target"]
        err = max(err, float(np.max(np.abs(a - b))))
    return err


@check("np_model: output floors (pred. std >= 0.1, latent std >= 1e-4)", 0.0)
def _(rng, n):
    worst = 0.0
    packed = pack(make_batch("rbf", 4, 0, 0))
    for variant in ("np", "ba", "mba", "rba"):
        model = small_model(variant)
        for p in model.params.values():
            p.data = p.data * 30.0
        mean, std, post = model.predict(packed, rng, 3)
        worst = max(worst, 0.1 - float(std.min()))
        if variant == "np":
            worst = max(worst, 1e-4 - float(np.sqrt(ad.as_array(post.var)).min()))
    return max(worst, 0.0)


@check("np_model: mixture K=1 and one robust sweep reproduce BA posteriors", 1e-9)
def _(rng, n):
    packed = pack(make_batch("rbf", 4, int(rng.integers(1 << 30)), 0))
    ba = small_model("ba", seed=1)
    err = 0.0
    for variant in ("mba", "rba"):
        cfg = ModelConfig(variant, latent_dim=8, ba_hidden=12, dec_hidden=16, k=1, cavi_steps=1)
        other = NeuralProcess(cfg, seed=1)
        state = ba.state_dict()
        if variant == "mba":
            state["prior.means"] = np.zeros((1, 8))
            state["prior.logits"] = np.zeros(1)
        other.load_state_dict(state)
        with ad.no_grad():
            for which in ("c", "ct"):
                a, b = ba.posterior(packed, which), other.posterior(packed, which)
                am, av = ad.as_array(a.mean), ad.as_array(a.var)
                bm, bv = ad.as_array(b.mean), ad.as_array(b.var)
                if b.is_mixture:
                    bm, bv = bm[:, 0], bv[:, 0]
                err = max(err, float(np.max(np.abs(am - bm))), float(np.max(np.abs(av - bv))))
    return err


@check("np_model: KL term vanishes when targets repeat the context", 1e-12)
def _(rng, n):
    from .taskgen import Task

    t = make_batch("rbf", 1, int(rng.integers(1 << 30)), 0)[0]
    same = Task(t.context_x, t.context_y, t.context_x[:0], t.context_y[:0])
    packed = pack([same])
    worst = 0.0
    for variant in ("np", "ba", "rba"):
        with ad.no_grad():
            model = small_model(variant)
            worst = max(worst, abs(float(ad.as_array(model.elbo(packed, 2, np.random.default_rng(0)))[0])))
    return worst


# -- oracle --------------------------------------------------------------------------------
@check("oracle: quadrature refinement change below 10% of the moment tolerance", 1e-7)
def _(rng, n):
    worst = 0.0
    for _ in range(n):
        f, p = random_factors(rng, 1), random_prior(rng, 1)
        post = agg.bayesian_aggregate(f, p)
        q = oracle.quadrature_posterior(f, oracle.gaussian_log_density(p.mean, p.var), _grid_for(post.mean, post.var))
        worst = max(worst, q["refinement_change"])
    return worst


@check("oracle: prior-only quadrature gives mean 0, var 1, log Z 0", 1e-9)
def _(rng, n):
    q = oracle.quadrature_posterior(FactorSet.empty(1), oracle.gaussian_log_density(0.0, 1.0),
                                    oracle.QuadratureGrid(((-12.0, 12.0),)))
    return float(max(abs(q["mean"][0]), abs(q["var"][0] - 1.0), abs(q["log_z"])))


@check("oracle: finite differences of a quadratic", 1e-6)
def _(rng, n):
    g = oracle.finite_diff_grad(lambda x: float(np.sum(x**2)), np.array([1.0, 2.0]))
    return float(np.max(np.abs(g - [2.0, 4.0])))


@check("oracle: finite-difference error shrinks with eps (ratio at eps/2)", 0.5, strict=True)
def _(rng, n):
    f = lambda x: float(np.sum(np.sin(3 * x) * np.exp(x)))  # noqa: E731
    x = np.array([0.3, -0.7])
    exact = 3 * np.cos(3 * x) * np.exp(x) + np.sin(3 * x) * np.exp(x)
    e1 = np.max(np.abs(oracle.finite_diff_grad(f, x, 1e-2) - exact))
    e2 = np.max(np.abs(oracle.finite_diff_grad(f, x, 5e-3) - exact))
    return float(e2 / e1)


@check("oracle: reference coordinate ascent has a = a0 + D/2 after one sweep", 1e-15)
def _(rng, n):
    err = 0.0
    for _ in range(n):
        dim = int(rng.integers(1, 6))
        prior = RobustPrior(*rng.uniform(0.01, 3.0, 3))
        st = oracle.reference_cavi(random_factors(rng, dim, n_min=1), prior, 1)
        err = max(err, abs(st.alpha_post.shape - (prior.a0 + dim / 2.0)))
    return err


# -- runner ---------------------------------------------------------------------------------
def run_checks(profile: str = "quick", seed: int = 0, only=None) -> list:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    n = PROFILES[profile]
    results = []
    for i, c in enumerate(REGISTRY):
        if only and not any(s in c.name for s in only):
            continue
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        note = ""
        try:
            err = float(c.fn(rng, n))
        except oracle.NonConvergentGrid as exc:
            err, note = math.inf, f"oracle failed: {exc}"
        except Exception as exc:  # a crash is a failed check, reported with its message
            err, note = math.inf, f"{type(exc).__name__}: {exc}"
        ok = (err < c.tol) if c.strict else (err <= c.tol)
        if math.isnan(err):
            ok = False
        results.append(CheckResult(c.name, err, c.tol, bool(ok), time.perf_counter() - t0, note))
    return results


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  {'max error':>11}  {'tolerance':>9}  result"]
    for r in results:
        line = f"{r.name.ljust(width)}  {r.max_error:11.3e}  {r.tol:9.1e}  {'PASS' if r.passed else 'FAIL'}"
        if r.note:
            line += f"  ({r.note})"
        lines.append(line)
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)


def write_report(results, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "max_error", "tolerance", "pass"])
        for r in results:
            w.writerow([r.name, repr(r.max_error), repr(r.tol), "true" if r.passed else "false"])
    return path
