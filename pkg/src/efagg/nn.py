"""MLPs, bounded output transforms, Adam with cosine annealing, checkpoints."""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1


class Mlp:
    """Affine layers with ReLU between them and a linear output layer.

    Parameter count is ``sum(w_in * w_out + w_out)`` over consecutive widths.
    Weights use fan-in scaled uniform (He) initialization, biases start at 0.
    """

    def __init__(self, widths, rng: np.random.Generator, name: str = "mlp"):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self.name = name
        self.params: "OrderedDict[str, ad.Tensor]" = OrderedDict()
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = math.sqrt(6.0 / n_in)
            self.params[f"{name}.W{i}"] = ad.Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
            self.params[f"{name}.b{i}"] = ad.Tensor(np.zeros(n_out), requires_grad=True)

    @staticmethod
    def count(widths) -> int:
        return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return self.count(self.widths)

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        if ad.as_array(x).shape[-1] != self.widths[0]:
            raise ValueError(f"{self.name}: expected input width {self.widths[0]}, got {ad.as_array(x).shape[-1]}")
        n_layers = len(self.widths) - 1
        h = x
        for i in range(n_layers):
            h = ad.matmul(h, self.params[f"{self.name}.W{i}"]) + self.params[f"{self.name}.b{i}"]
            if i < n_layers - 1:
                h = ad.relu(h)
        return h


def bounded_softplus(x, lower: float):
    """``lower + (1 - lower) * softplus(x)``: smooth, increasing, above ``lower``."""
    if lower <= 0:
        raise ValueError("lower bound must be positive")
    return lower + (1.0 - lower) * ad.softplus(x)


def bounded_sigmoid(x, lower: float):
    """``lower + (1 - lower) * sigmoid(x)``: values in ``(lower, 1)``."""
    if not 0 < lower < 1:
        raise ValueError("lower bound must lie in (0, 1)")
    return lower + (1.0 - lower) * ad.sigmoid(x)


def cosine_lr(base_lr: float, step: int, horizon: int) -> float:
    if horizon <= 0:
        return base_lr
    t = min(step, horizon)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / horizon))


class Adam:
    """Adam (0.9, 0.999, 1e-8) whose learning rate follows a cosine schedule."""

    def __init__(self, params, lr: float = 5e-4, horizon: int = 100_000,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.base_lr = lr
        self.horizon = horizon
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def lr(self, step=None) -> float:
        return cosine_lr(self.base_lr, self.step_count if step is None else step, self.horizon)

    def step(self, grads=None) -> None:
        """Apply one update; ``grads`` defaults to each parameter's ``.grad``."""
        lr = self.lr()
        t = self.step_count + 1
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            g = p.grad if grads is None else grads[k]
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.data.shape}")
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        self.step_count = t

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam.m.{k}"])
            self.v[k] = np.array(arrays[f"adam.v.{k}"])
        self.step_count = step_count


# -- checkpoints ------------------------------------------------------------------------
def save_checkpoint(path, params, meta: dict, extra_arrays=None) -> Path:
    """Write parameters, optional extra arrays and JSON metadata to one ``.npz``.

    Layout: one array per parameter under ``param/<name>``, extra arrays under
    their own keys, and ``__meta__`` holding a JSON document with
    ``format_version``, parameter shapes and whatever the caller adds (config,
    RNG state, step count).
    """
    path = Path(path)
    arrays = {f"param/{k}": ad.as_array(p) for k, p in params.items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    meta = dict(meta)
    meta["format_version"] = CHECKPOINT_VERSION
    meta["shapes"] = {k: list(ad.as_array(p).shape) for k, p in params.items()}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Return ``(params, meta, extra_arrays)`` from :func:`save_checkpoint` output."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        params, extra = OrderedDict(), {}
        for k in data.files:
            if k.startswith("param/"):
                params[k[len("param/"):]] = np.array(data[k])
            elif k != "__meta__":
                extra[k] = np.array(data[k])
    for k, shape in meta["shapes"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"checkpoint parameter {k} has shape {params[k].shape}, expected {shape}")
    return params, meta, extra
