# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled inference kernels (no gradients).

Points of task ``b`` occupy rows ``offsets[b]:offsets[b + 1]`` of ``m`` and ``v``.
Signatures and outputs match :mod:`efagg._fallback` exactly.
"""
import numpy as np

from libc.math cimport exp, fabs, lgamma, log, sqrt

cdef double LOG_2PI = 1.8378770664093453
cdef double VAR_FLOOR = 1e-12


cdef inline double digamma(double x) nogil:
    cdef double r = 0.0
    cdef double f
    while x < 6.0:
        r -= 1.0 / x
        x += 1.0
    f = 1.0 / (x * x)
    return r + log(x) - 0.5 / x - f * (1.0 / 12 - f * (1.0 / 120 - f * (1.0 / 252 - f * (1.0 / 240 - f / 132.0))))


def digamma_vec(double[::1] x):
    out = np.empty(x.shape[0])
    cdef double[::1] o = out
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        o[i] = digamma(x[i])
    return out


def ba_batch(double[:, ::1] m, double[:, ::1] v, long long[::1] offsets,
             double[::1] prior_mean, double[::1] prior_var):
    cdef Py_ssize_t B = offsets.shape[0] - 1
    cdef Py_ssize_t D = m.shape[1]
    mean_out = np.empty((B, D))
    var_out = np.empty((B, D))
    cdef double[:, ::1] mo = mean_out
    cdef double[:, ::1] vo = var_out
    cdef Py_ssize_t b, i, d
    cdef double prec, num, var
    with nogil:
        for b in range(B):
            for d in range(D):
                prec = 1.0 / prior_var[d]
                num = prior_mean[d] / prior_var[d]
                for i in range(offsets[b], offsets[b + 1]):
                    prec += 1.0 / v[i, d]
                    num += m[i, d] / v[i, d]
                var = 1.0 / prec
                if var < VAR_FLOOR:
                    var = VAR_FLOOR
                vo[b, d] = var
                mo[b, d] = var * num
    return mean_out, var_out


def rba_batch(double[:, ::1] m, double[:, ::1] v, long long[::1] offsets,
              double a0, double b0, double c0, int steps, bint record_elbo):
    """Mean-field coordinate ascent for every task in the batch.

    Returns ``(mean, var, a, b, c, d, elbo)`` where ``elbo`` has shape
    ``(B, steps)`` (zeros unless ``record_elbo``).
    """
    cdef Py_ssize_t B = offsets.shape[0] - 1
    cdef Py_ssize_t D = m.shape[1]
    cdef Py_ssize_t P = m.shape[0]
    mean_out = np.zeros((B, D))
    var_out = np.zeros((B, D))
    a_out = np.zeros(B)
    b_out = np.zeros(B)
    d_out = np.zeros(P)
    elbo_out = np.zeros((B, steps))
    cdef double[:, ::1] mo = mean_out
    cdef double[:, ::1] vo = var_out
    cdef double[::1] ao = a_out
    cdef double[::1] bo = b_out
    cdef double[::1] dd = d_out
    cdef double[:, ::1] eo = elbo_out
    cdef double[::1] e_beta = np.ones(P)
    cdef Py_ssize_t bt, i, d, s
    cdef double e_alpha, prec, num, var, a, b, c, sq, q, lin, tr
    cdef double e_log_alpha, e_log_beta, total, sum_log_v
    cdef double dimf = <double>D
    cdef double const_alpha = a0 * log(b0) - lgamma(a0)
    cdef double const_beta = c0 * log(c0) - lgamma(c0)
    c = c0 + 0.5 * dimf
    with nogil:
        for bt in range(B):
            e_alpha = 1.0
            a = 1.0
            b = 1.0
            for i in range(offsets[bt], offsets[bt + 1]):
                e_beta[i] = 1.0
            for s in range(steps):
                sq = 0.0
                for d in range(D):
                    prec = e_alpha
                    num = 0.0
                    for i in range(offsets[bt], offsets[bt + 1]):
                        prec += e_beta[i] / v[i, d]
                        num += e_beta[i] * m[i, d] / v[i, d]
                    var = 1.0 / prec
                    if var < VAR_FLOOR:
                        var = VAR_FLOOR
                    vo[bt, d] = var
                    mo[bt, d] = var * num
                    sq += mo[bt, d] * mo[bt, d] + var
                a = a0 + 0.5 * dimf
                b = b0 + 0.5 * sq
                for i in range(offsets[bt], offsets[bt + 1]):
                    q = 0.0
                    lin = 0.0
                    tr = 0.0
                    for d in range(D):
                        q += m[i, d] * m[i, d] / v[i, d]
                        lin += m[i, d] * mo[bt, d] / v[i, d]
                        tr += (mo[bt, d] * mo[bt, d] + vo[bt, d]) / v[i, d]
                    dd[i] = c0 + 0.5 * (q - 2.0 * lin + tr)
                e_alpha = a / b
                for i in range(offsets[bt], offsets[bt + 1]):
                    e_beta[i] = c / dd[i]
                if record_elbo:
                    e_log_alpha = digamma(a) - log(b)
                    total = -0.5 * dimf * LOG_2PI + 0.5 * dimf * e_log_alpha - 0.5 * e_alpha * sq
                    total += const_alpha + (a0 - 1.0) * e_log_alpha - b0 * e_alpha
                    for d in range(D):
                        total += 0.5 * (1.0 + LOG_2PI + log(vo[bt, d]))
                    total += a - log(b) + lgamma(a) + (1.0 - a) * digamma(a)
                    for i in range(offsets[bt], offsets[bt + 1]):
                        e_log_beta = digamma(c) - log(dd[i])
                        q = 0.0
                        sum_log_v = 0.0
                        for d in range(D):
                            q += ((mo[bt, d] - m[i, d]) ** 2 + vo[bt, d]) / v[i, d]
                            sum_log_v += log(v[i, d])
                        total += (-0.5 * dimf * LOG_2PI + 0.5 * dimf * e_log_beta
                                  - 0.5 * sum_log_v - 0.5 * e_beta[i] * q)
                        total += const_beta + (c0 - 1.0) * e_log_beta - c0 * e_beta[i]
                        total += c - log(dd[i]) + lgamma(c) + (1.0 - c) * digamma(c)
                    eo[bt, s] = total
            ao[bt] = a
            bo[bt] = b
    return mean_out, var_out, a_out, b_out, c, d_out, elbo_out


def gram_rbf(double[::1] x, double scale, double lengthscale):
    cdef Py_ssize_t n = x.shape[0]
    out = np.empty((n, n))
    cdef double[:, ::1] k = out
    cdef Py_ssize_t i, j
    cdef double s2 = scale * scale
    cdef double inv = 1.0 / (2.0 * lengthscale * lengthscale)
    cdef double r
    with nogil:
        for i in range(n):
            k[i, i] = s2
            for j in range(i):
                r = x[i] - x[j]
                k[i, j] = s2 * exp(-r * r * inv)
                k[j, i] = k[i, j]
    return out


def gram_matern52(double[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    out = np.empty((n, n))
    cdef double[:, ::1] k = out
    cdef Py_ssize_t i, j
    cdef double d
    cdef double s5 = sqrt(5.0)
    with nogil:
        for i in range(n):
            k[i, i] = 1.0
            for j in range(i):
                d = 4.0 * fabs(x[i] - x[j])
                k[i, j] = (1.0 + s5 * d + 5.0 * d * d / 3.0) * exp(-s5 * d)
                k[j, i] = k[i, j]
    return out
