"""Pure-numpy implementations of the compiled kernels in ``_kernels.pyx``."""
import numpy as np
from scipy import special

from .aggregation import RobustPrior, ba_batched, rba_batched


def _segments(offsets, n_points):
    offsets = np.asarray(offsets)
    seg = np.zeros((len(offsets) - 1, n_points))
    for b in range(len(offsets) - 1):
        seg[b, offsets[b] : offsets[b + 1]] = 1.0
    return seg


def digamma_vec(x):
    return special.digamma(np.asarray(x, dtype=np.float64))


def ba_batch(m, v, offsets, prior_mean, prior_var):
    return ba_batched(m, v, _segments(offsets, m.shape[0]), prior_mean, prior_var)


def rba_batch(m, v, offsets, a0, b0, c0, steps, record_elbo):
    out = rba_batched(m, v, _segments(offsets, m.shape[0]), RobustPrior(a0, b0, c0), steps, record_elbo)
    bsz = len(offsets) - 1
    elbo = out["elbo"] if record_elbo else np.zeros((bsz, steps))
    a = np.full(bsz, float(out["a"]))
    return out["mean"], out["var"], a, out["b"][:, 0], out["c"], out["d"][:, 0], elbo


def gram_rbf(x, scale, lengthscale):
    r = x[:, None] - x[None, :]
    return scale**2 * np.exp(-(r**2) / (2.0 * lengthscale**2))


def gram_matern52(x):
    d = 4.0 * np.abs(x[:, None] - x[None, :])
    return (1.0 + np.sqrt(5.0) * d + 5.0 * d**2 / 3.0) * np.exp(-np.sqrt(5.0) * d)
