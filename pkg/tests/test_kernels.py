import numpy as np
import pytest

from efagg import kernels

pytestmark = pytest.mark.skipif(kernels.BACKEND != "compiled", reason="compiled extension not built")


def _case(rng, n_tasks=5, dim=4):
    counts = rng.integers(0, 9, n_tasks)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    n = int(offsets[-1])
    return rng.normal(size=(n, dim)), rng.uniform(0.1, 3.0, (n, dim)), offsets


def test_ba_backends_agree(rng):
    m, v, off = _case(rng)
    comp = kernels.ba_batch(m, v, off, 0.0, 1.0, impl=kernels.implementation("compiled"))
    py = kernels.ba_batch(m, v, off, 0.0, 1.0, impl=kernels.implementation("python"))
    for a, b in zip(comp, py):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_rba_backends_agree(rng):
    m, v, off = _case(rng)
    args = (m, v, off, 4e-6, 4e-6, 0.04, 10, True)
    comp = kernels.rba_batch(*args, impl=kernels.implementation("compiled"))
    py = kernels.rba_batch(*args, impl=kernels.implementation("python"))
    for a, b in zip(comp, py):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_gram_backends_agree(rng):
    x = rng.uniform(-2, 2, 30)
    c, p = kernels.implementation("compiled"), kernels.implementation("python")
    np.testing.assert_allclose(kernels.gram_rbf(x, 0.7, 0.3, impl=c), kernels.gram_rbf(x, 0.7, 0.3, impl=p),
                               rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(kernels.gram_matern52(x, impl=c), kernels.gram_matern52(x, impl=p),
                               rtol=1e-13, atol=1e-15)


def test_pure_python_switch(monkeypatch):
    import importlib

    monkeypatch.setenv("EFAGG_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("EFAGG_PURE_PYTHON")
        importlib.reload(kernels)


def test_read_only_inputs_accepted(rng):
    m, v, off = _case(rng, dim=1)
    m.setflags(write=False)
    v.setflags(write=False)
    mean, var = kernels.ba_batch(m, v, off, 0.0, 1.0)
    assert mean.shape == (5, 1) and np.all(var > 0)
