import math

import numpy as np
import pytest

from efagg import autodiff as ad
from efagg.nn import (
    Adam,
    Mlp,
    bounded_sigmoid,
    bounded_softplus,
    cosine_lr,
    load_checkpoint,
    save_checkpoint,
)
from efagg.oracle import finite_diff_grad


def test_param_count_formula(rng):
    net = Mlp([2, 5, 3], rng)
    assert net.n_params == 2 * 5 + 5 + 5 * 3 + 3
    assert net.n_params == sum(p.data.size for p in net.params.values())


def test_zero_weights_give_zero_output(rng):
    net = Mlp([3, 4, 2], rng)
    for p in net.params.values():
        p.data = np.zeros_like(p.data)
    np.testing.assert_array_equal(ad.as_array(net(np.ones((2, 3)))), 0.0)


def test_identity_single_layer_passes_input(rng):
    net = Mlp([3, 3], rng)
    net.params["mlp.W0"].data = np.eye(3)
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(ad.as_array(net(x)), x)


def test_forward_matches_hand_chain(rng):
    net = Mlp([3, 4, 2], rng)
    x = rng.normal(size=(2, 3))
    p = {k.split(".")[1]: v.data for k, v in net.params.items()}
    hand = np.maximum(x @ p["W0"] + p["b0"], 0.0) @ p["W1"] + p["b1"]
    np.testing.assert_allclose(ad.as_array(net(x)), hand, rtol=0, atol=1e-12)


def test_width_mismatch_raises(rng):
    with pytest.raises(ValueError):
        Mlp([3, 2], rng)(np.ones((1, 4)))


def test_mlp_grads_match_finite_differences(rng):
    net = Mlp([3, 6, 6, 2], rng)
    x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    ad.mean((net(x) - y) ** 2).backward()
    for p in net.params.values():
        def f(val, p=p):
            old, p.data = p.data, val
            out = float(ad.as_array(ad.mean((net(x) - y) ** 2)))
            p.data = old
            return out

        fd = finite_diff_grad(f, p.data.copy(), eps=1e-5)
        np.testing.assert_allclose(p.grad, fd, rtol=1e-4, atol=1e-9)


def test_bounded_softplus_values():
    assert bounded_softplus(np.array([0.0]), 0.1)[0] == pytest.approx(0.1 + 0.9 * math.log(2.0), abs=1e-12)
    assert bounded_softplus(np.array([-40.0]), 0.1)[0] == pytest.approx(0.1, abs=1e-9)
    x = np.linspace(-5, 5, 101)
    assert np.all(np.diff(bounded_softplus(x, 0.1)) > 0)
    assert np.all(bounded_softplus(x, 0.1) > 0.1)


def test_bounded_softplus_derivative():
    x = np.array([-1.3, 0.2, 2.5])
    t = ad.Tensor(x, requires_grad=True)
    ad.sum(bounded_softplus(t, 0.1)).backward()
    fd = finite_diff_grad(lambda v: float(np.sum(bounded_softplus(v, 0.1))), x)
    np.testing.assert_allclose(t.grad, fd, atol=1e-6)


def test_bounded_sigmoid_values():
    assert bounded_sigmoid(np.array([0.0]), 1e-4)[0] == pytest.approx(0.50005, abs=1e-12)
    assert bounded_sigmoid(np.array([40.0]), 1e-4)[0] == pytest.approx(1.0, abs=1e-9)
    assert bounded_sigmoid(np.array([-40.0]), 1e-4)[0] == pytest.approx(1e-4, abs=1e-9)


@pytest.mark.parametrize("lower", [0.0, 1.0, -0.5])
def test_bounded_sigmoid_rejects_bad_lower(lower):
    with pytest.raises(ValueError):
        bounded_sigmoid(np.zeros(1), lower)


def test_cosine_schedule():
    assert cosine_lr(5e-4, 0, 1000) == 5e-4
    assert cosine_lr(5e-4, 500, 1000) == pytest.approx(2.5e-4, abs=1e-12)
    assert cosine_lr(5e-4, 1000, 1000) == pytest.approx(0.0, abs=1e-18)


def test_adam_zero_gradient_leaves_params():
    p = {"w": ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    opt = Adam(p, lr=1e-3, horizon=10)
    opt.step({"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = {"w": ad.Tensor(np.array([0.5]), requires_grad=True)}
    opt = Adam(p, lr=5e-4, horizon=1000)
    opt.step({"w": np.ones(1)})
    assert 0.5 - p["w"].data[0] == pytest.approx(5e-4, rel=1e-6)


def test_adam_shape_mismatch():
    p = {"w": ad.Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(ValueError):
        Adam(p).step({"w": np.zeros(3)})


def test_adam_reduces_quadratic():
    w = ad.Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1, horizon=200)
    for _ in range(200):
        opt.zero_grad()
        ad.sum(w * w).backward()
        opt.step()
    assert np.max(np.abs(w.data)) < 0.05


def test_checkpoint_round_trip(tmp_path, rng):
    net = Mlp([2, 3, 1], rng, "net")
    path = save_checkpoint(tmp_path / "c.npz", net.params, {"seed": 3}, {"adam.m": np.arange(3.0)})
    params, meta, extra = load_checkpoint(path)
    assert meta["seed"] == 3 and meta["format_version"] == 1
    assert meta["shapes"]["net.W0"] == [2, 3]
    for k, p in net.params.items():
        np.testing.assert_array_equal(params[k], p.data)
    np.testing.assert_array_equal(extra["adam.m"], np.arange(3.0))


def test_checkpoint_version_checked(tmp_path, rng):
    import json

    net = Mlp([2, 1], rng)
    path = save_checkpoint(tmp_path / "c.npz", net.params, {})
    with np.load(path) as data:
        arrays = dict(data)
    meta = json.loads(str(arrays["__meta__"]))
    meta["format_version"] = 99
    arrays["__meta__"] = np.array(json.dumps(meta))
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "bad.npz")
