"""Hot inference kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built and ``EFAGG_PURE_PYTHON`` is
unset; otherwise the numpy versions take over. Both expose the same
functions. Neither records gradients: training goes through the
differentiable path in :mod:`efagg.aggregation`.
"""
import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback
if not os.environ.get("EFAGG_PURE_PYTHON"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _fallback


def implementation(name: str):
    """Return the module providing kernels for ``name`` in {"compiled", "python"}."""
    if name == "python":
        return _fallback
    from . import _kernels

    return _kernels


def _buf(x, dtype=np.float64):
    # typed memoryviews reject read-only buffers such as broadcast views
    return np.require(x, dtype=dtype, requirements=["C", "W"])


def _prep(m, v, offsets):
    return _buf(m), _buf(v), _buf(offsets, np.int64)


def ba_batch(m, v, offsets, prior_mean, prior_var, impl=None):
    impl = impl or _impl
    m, v, offsets = _prep(m, v, offsets)
    dim = m.shape[1]
    pm = _buf(np.broadcast_to(prior_mean, (dim,)))
    pv = _buf(np.broadcast_to(prior_var, (dim,)))
    return impl.ba_batch(m, v, offsets, pm, pv)


def rba_batch(m, v, offsets, a0, b0, c0, steps, record_elbo=False, impl=None):
    impl = impl or _impl
    m, v, offsets = _prep(m, v, offsets)
    return impl.rba_batch(m, v, offsets, float(a0), float(b0), float(c0), int(steps), bool(record_elbo))


def gram_rbf(x, scale, lengthscale, impl=None):
    impl = impl or _impl
    return impl.gram_rbf(_buf(x), float(scale), float(lengthscale))


def gram_matern52(x, impl=None):
    impl = impl or _impl
    return impl.gram_matern52(_buf(x))
