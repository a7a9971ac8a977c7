"""Exponential-family primitives: diagonal Gaussians, Gammas and Gaussian mixtures.

Every value type is immutable. Fields may hold plain arrays or autodiff
tensors; validation of invariants runs on plain arrays only, so the same
types can flow through a differentiable forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from . import autodiff as ad

VAR_FLOOR = 1e-12
LOG_2PI = float(np.log(2.0 * np.pi))


class DimensionError(ValueError):
    """Raised when operands disagree on the latent dimension."""


def floor_var(v):
    """Clamp variance-like quantities from below after arithmetic."""
    return ad.maximum(v, VAR_FLOOR)


def _dim(x) -> int:
    return ad.as_array(x).shape[-1]


def _check_same_dim(*xs) -> int:
    dims = {_dim(x) for x in xs}
    if len(dims) != 1:
        raise DimensionError(f"dimension mismatch: {sorted(dims)}")
    return dims.pop()


@dataclass(frozen=True)
class DiagGaussian:
    """Gaussian with diagonal covariance in moment parameters."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        if ad.is_tensor(self.mean) or ad.is_tensor(self.var):
            return
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        var = np.atleast_1d(np.asarray(self.var, dtype=np.float64))
        if mean.shape != var.shape:
            raise DimensionError(f"mean shape {mean.shape} != var shape {var.shape}")
        if not np.all(var > 0):
            raise ValueError("variances must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return _dim(self.mean)

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.ones(dim))


@dataclass(frozen=True)
class NaturalGaussian:
    """Diagonal Gaussian in natural parameters ``(mean/var, -1/(2 var))``."""

    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        eta1 = np.atleast_1d(np.asarray(self.eta1, dtype=np.float64))
        eta2 = np.atleast_1d(np.asarray(self.eta2, dtype=np.float64))
        if eta1.shape != eta2.shape:
            raise DimensionError(f"eta1 shape {eta1.shape} != eta2 shape {eta2.shape}")
        object.__setattr__(self, "eta1", eta1)
        object.__setattr__(self, "eta2", eta2)


@dataclass(frozen=True)
class GammaDist:
    """Gamma distribution with shape/rate parameterization."""

    shape: float
    rate: float

    def __post_init__(self):
        if ad.is_tensor(self.shape) or ad.is_tensor(self.rate):
            return
        if not (np.all(np.asarray(self.shape) > 0) and np.all(np.asarray(self.rate) > 0)):
            raise ValueError(f"Gamma parameters must be positive, got {self.shape}, {self.rate}")

    def mean(self):
        return self.shape / self.rate


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a mixture needs at least one component")
        _check_same_dim(*[c.mean for c in comps])
        object.__setattr__(self, "components", comps)
        if ad.is_tensor(self.weights):
            return
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(comps),):
            raise ValueError(f"expected {len(comps)} weights, got shape {w.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must lie on the simplex")
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @classmethod
    def from_log_weights(cls, log_weights, components: Sequence[DiagGaussian]):
        lw = np.asarray(log_weights, dtype=np.float64)
        lw = lw - special.logsumexp(lw)
        w = np.exp(lw)
        return cls(w / w.sum(), tuple(components))


# -- parameterization ----------------------------------------------------------
def to_natural(g: DiagGaussian) -> NaturalGaussian:
    return NaturalGaussian(g.mean / g.var, -0.5 / g.var)


def to_moment(n: NaturalGaussian) -> DiagGaussian:
    if np.any(n.eta2 >= 0):
        raise ValueError("eta2 must be strictly negative (non-normalizable Gaussian)")
    var = -0.5 / n.eta2
    return DiagGaussian(n.eta1 * var, var)


# -- densities -------------------------------------------------------------------
def diag_log_density(z, mean, var):
    """Log density of ``N(z | mean, diag(var))`` summed over the last axis."""
    return -0.5 * ad.sum(LOG_2PI + ad.log(var) + (z - mean) ** 2 / var, axis=-1)


def diag_kl(mean_q, var_q, mean_p, var_p):
    """``KL(N(mean_q, var_q) || N(mean_p, var_p))`` summed over the last axis."""
    ratio = var_q / var_p
    return 0.5 * ad.sum(ratio - 1.0 - ad.log(ratio) + (mean_q - mean_p) ** 2 / var_p, axis=-1)


def log_prob(g: DiagGaussian, z) -> float:
    if _dim(z) != g.dim:
        raise DimensionError(f"point has dimension {_dim(z)}, distribution {g.dim}")
    return diag_log_density(z, g.mean, g.var)


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian):
    _check_same_dim(q.mean, p.mean)
    return diag_kl(q.mean, q.var, p.mean, p.var)


def entropy(g: DiagGaussian):
    return 0.5 * ad.sum(1.0 + LOG_2PI + ad.log(g.var), axis=-1)


def sample(g: DiagGaussian, rng: np.random.Generator, n: int):
    """Reparameterized draws: ``mean + sqrt(var) * eps`` with shape ``(n, D)``.

    Gradients reach ``mean`` and ``var`` when they are tensors.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    eps = rng.standard_normal((n, g.dim))
    return g.mean + ad.sqrt(g.var) * eps


def mixture_log_prob(m: GaussianMixture, z):
    if _dim(z) != m.dim:
        raise DimensionError(f"point has dimension {_dim(z)}, mixture {m.dim}")
    terms = [np.log(w) + log_prob(c, z) for w, c in zip(np.asarray(m.weights), m.components)]
    return special.logsumexp(np.stack(terms, axis=-1), axis=-1)


def sample_mixture(m: GaussianMixture, rng: np.random.Generator, n: int) -> np.ndarray:
    ks = rng.choice(len(m.components), size=n, p=m.weights)
    eps = rng.standard_normal((n, m.dim))
    means = np.stack([c.mean for c in m.components])[ks]
    sds = np.sqrt(np.stack([c.var for c in m.components]))[ks]
    return means + sds * eps


# -- Gamma -------------------------------------------------------------------------
def gamma_expectation(g: GammaDist):
    return g.shape / g.rate


def gamma_log_expectation(g: GammaDist):
    """``E[log x]`` under ``Gamma(shape, rate)``."""
    return special.digamma(g.shape) - np.log(g.rate)


def gamma_entropy(g: GammaDist):
    a = g.shape
    return a - np.log(g.rate) + special.gammaln(a) + (1.0 - a) * special.digamma(a)


def gamma_expected_log_density(shape0, rate0, e_x, e_log_x):
    """``E[log Gamma(x | shape0, rate0)]`` given ``E[x]`` and ``E[log x]``."""
    return shape0 * np.log(rate0) - special.gammaln(shape0) + (shape0 - 1.0) * e_log_x - rate0 * e_x
