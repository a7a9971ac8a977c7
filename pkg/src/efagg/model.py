"""Neural process with pluggable context aggregation.

Four encoder variants share one decoder:

``np``
    per-point encodings, mean pooling, then a second network producing the
    latent mean and standard deviation.
``ba``
    per-point Gaussian factors combined with a fixed ``N(0, I)`` prior.
``mba``
    the same factors combined with a learned Gaussian-mixture prior.
``rba``
    Student-t factors (Gaussian factors with Gamma precisions) aggregated by
    unrolled mean-field coordinate ascent.

Batches are packed so that every task contributes its context points followed
by its target points; segment matrices select the context set or the union
for each task.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from types import SimpleNamespace
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .aggregation import (
    FactorSet,
    RobustPrior,
    ba_batched,
    mba_batched,
    mixture_log_density_batched,
    rba_batched,
)
from .ef_core import LOG_2PI, diag_kl
from .nn import Mlp, bounded_sigmoid, bounded_softplus
from .taskgen import Task, TaskBatch

VARIANTS = ("np", "ba", "mba", "rba")
LATENT_STD_FLOOR = 1e-4
PRED_STD_FLOOR = 0.1


@dataclass
class ModelConfig:
    variant: str = "ba"
    latent_dim: int = 128
    np_hidden: int = 128
    ba_hidden: int = 64
    ba_layers: int = 4
    dec_hidden: int = 128
    dec_layers: int = 3
    k: int = 2
    cavi_steps: int = 5
    prior_mean_std: float = 0.1
    robust_prior: Optional[dict] = None
    learn_robust_prior: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "mba" and self.k < 1:
            raise ValueError("mixture prior needs k >= 1")
        if self.variant == "rba" and self.cavi_steps < 1:
            raise ValueError("cavi_steps must be at least 1")

    def robust(self) -> RobustPrior:
        if self.robust_prior:
            return RobustPrior(**self.robust_prior)
        return RobustPrior.scaled(self.latent_dim)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Packed:
    """A batch of tasks flattened to point arrays plus segment matrices."""

    x: np.ndarray  # (P, 1)
    y: np.ndarray  # (P, 1)
    seg_c: np.ndarray  # (B, P) context points of each task
    seg_ct: np.ndarray  # (B, P) context and target points
    ctx_rows: np.ndarray
    ctx_offsets: np.ndarray
    all_offsets: np.ndarray
    tgt_rows: np.ndarray
    tgt_task: np.ndarray
    seg_t: np.ndarray  # (B, P_t) over the target rows only
    n_context: np.ndarray


def pack(batch) -> Packed:
    xs, ys, ctx_rows, tgt_rows, tgt_task = [], [], [], [], []
    counts_c, counts_all = [], []
    pos = 0
    for b, t in enumerate(batch):
        nc, nt = t.n_context, t.n_target
        xs += [t.context_x, t.target_x]
        ys += [t.context_y, t.target_y]
        ctx_rows.append(np.arange(pos, pos + nc))
        tgt_rows.append(np.arange(pos + nc, pos + nc + nt))
        tgt_task.append(np.full(nt, b))
        counts_c.append(nc)
        counts_all.append(nc + nt)
        pos += nc + nt
    n_tasks = len(counts_c)
    all_offsets = np.concatenate([[0], np.cumsum(counts_all)]).astype(np.int64)
    seg_c = np.zeros((n_tasks, pos))
    seg_ct = np.zeros((n_tasks, pos))
    for b in range(n_tasks):
        o = all_offsets[b]
        seg_c[b, o : o + counts_c[b]] = 1.0
        seg_ct[b, o : all_offsets[b + 1]] = 1.0
    tgt_rows = np.concatenate(tgt_rows).astype(int) if tgt_rows else np.zeros(0, int)
    tgt_task = np.concatenate(tgt_task).astype(int) if tgt_task else np.zeros(0, int)
    seg_t = np.zeros((n_tasks, len(tgt_rows)))
    seg_t[tgt_task, np.arange(len(tgt_rows))] = 1.0
    return Packed(
        x=np.concatenate(xs)[:, None],
        y=np.concatenate(ys)[:, None],
        seg_c=seg_c,
        seg_ct=seg_ct,
        ctx_rows=np.concatenate(ctx_rows).astype(int),
        ctx_offsets=np.concatenate([[0], np.cumsum(counts_c)]).astype(np.int64),
        all_offsets=all_offsets,
        tgt_rows=tgt_rows,
        tgt_task=tgt_task,
        seg_t=seg_t,
        n_context=np.array(counts_c),
    )


class Posterior:
    """Latent posterior for a batch: Gaussian ``(mean, var)`` or a mixture."""

    def __init__(self, mean, var, log_w=None):
        self.mean = mean
        self.var = var
        self.log_w = log_w
        self.extra: dict = {}

    @property
    def is_mixture(self) -> bool:
        return self.log_w is not None

    def sample(self, rng: np.random.Generator, n_samples: int):
        """Reparameterized draws of shape ``(S, B, D)``.

        For mixtures the component index is drawn from the detached weights,
        so no gradient reaches the weights through the sampling path.
        """
        if not self.is_mixture:
            bsz, dim = ad.as_array(self.mean).shape
            eps = rng.standard_normal((n_samples, bsz, dim))
            return self.mean + ad.sqrt(self.var) * eps
        log_w = ad.as_array(self.log_w)
        bsz, k, dim = ad.as_array(self.mean).shape
        w = np.exp(log_w - log_w.max(axis=1, keepdims=True))
        cum = np.cumsum(w / w.sum(axis=1, keepdims=True), axis=1)
        u = rng.random((n_samples, bsz, 1))
        comp = np.minimum((u > cum[None]).sum(axis=-1), k - 1)
        eps = rng.standard_normal((n_samples, bsz, dim))
        rows = np.broadcast_to(np.arange(bsz)[None, :], comp.shape)
        idx = (rows, comp)
        return ad.getitem(self.mean, idx) + ad.sqrt(ad.getitem(self.var, idx)) * eps

    def log_density(self, z):
        if self.is_mixture:
            return mixture_log_density_batched(z, self.log_w, self.mean, self.var)
        return -0.5 * ad.sum(LOG_2PI + ad.log(self.var) + (z - self.mean) ** 2 / self.var, axis=-1)


class NeuralProcess:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([3, seed])
        d = config.latent_dim
        self.params: "OrderedDict[str, ad.Tensor]" = OrderedDict()
        self.encoders = []
        if config.variant == "np":
            h = config.np_hidden
            self.enc_r = Mlp([2, h, h, h], rng, "enc_r")
            self.enc_z = Mlp([h, h, 2 * d], rng, "enc_z")
            self.encoders = [self.enc_r, self.enc_z]
        else:
            h = config.ba_hidden
            widths = [2] + [h] * (config.ba_layers - 1) + [d]
            self.enc_m = Mlp(widths, rng, "enc_m")
            self.enc_v = Mlp(widths, rng, "enc_v")
            self.encoders = [self.enc_m, self.enc_v]
        hd = config.dec_hidden
        dec_widths = [1 + d] + [hd] * (config.dec_layers - 1) + [1]
        self.dec_mean = Mlp(dec_widths, rng, "dec_mean")
        self.dec_std = Mlp(dec_widths, rng, "dec_std")
        for mod in self.encoders + [self.dec_mean, self.dec_std]:
            self.params.update(mod.params)
        if config.variant == "mba":
            self.params["prior.means"] = ad.Tensor(
                config.prior_mean_std * rng.standard_normal((config.k, d)), requires_grad=True
            )
            self.params["prior.logits"] = ad.Tensor(np.zeros(config.k), requires_grad=True)
        self.robust_prior = config.robust() if config.variant == "rba" else None
        if config.variant == "rba" and config.learn_robust_prior:
            rp = self.robust_prior
            for name in ("a0", "b0", "c0"):
                self.params[f"robust.log_{name}"] = ad.Tensor(np.log(getattr(rp, name)), requires_grad=True)

    # -- parameters ---------------------------------------------------------------
    def encoder_param_count(self) -> int:
        return sum(m.n_params for m in self.encoders)

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"parameter {k}: shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def mixture_prior(self):
        logits = self.params["prior.logits"]
        log_w = logits - ad.logsumexp(logits, axis=-1)
        return log_w, self.params["prior.means"], np.ones((self.config.k, self.config.latent_dim))

    def gamma_prior(self):
        """Gamma hyperparameters as used by the forward pass (tensors when learned)."""
        if not self.config.learn_robust_prior:
            return self.robust_prior
        return SimpleNamespace(**{n: ad.exp(self.params[f"robust.log_{n}"]) for n in ("a0", "b0", "c0")})

    # -- encoder --------------------------------------------------------------------
    def factors(self, x, y):
        """Per-point factor moments ``(m, V)``; ``V`` is bounded below by 1e-4."""
        xy = np.concatenate([np.reshape(x, (-1, 1)), np.reshape(y, (-1, 1))], axis=1)
        m = self.enc_m(xy)
        v = bounded_sigmoid(self.enc_v(xy), LATENT_STD_FLOOR)
        return m, v

    def encode(self, x, y):
        """Encode one context set.

        Returns a :class:`FactorSet` for the aggregation variants and the
        pooled representation ``r_bar`` for ``np``.
        """
        if self.config.variant == "np":
            if len(np.ravel(x)) == 0:
                raise ValueError("mean pooling needs at least one context point")
            xy = np.stack([np.ravel(x), np.ravel(y)], axis=1)
            return ad.mean(self.enc_r(xy), axis=0)
        m, v = self.factors(x, y)
        return FactorSet(m, v)

    def posterior(self, packed: Packed, which: str = "c", cavi_steps: Optional[int] = None,
                  record_bound: bool = False, cache=None) -> Posterior:
        seg = packed.seg_c if which == "c" else packed.seg_ct
        variant = self.config.variant
        xy = np.concatenate([packed.x, packed.y], axis=1)
        if variant == "np":
            r = cache["r"] if cache and "r" in cache else self.enc_r(xy)
            if cache is not None:
                cache["r"] = r
            counts = seg.sum(axis=1, keepdims=True)
            r_bar = ad.matmul(seg, r) / counts
            out = self.enc_z(r_bar)
            d = self.config.latent_dim
            std = bounded_sigmoid(out[:, d:], LATENT_STD_FLOOR)
            return Posterior(out[:, :d], std * std)
        if cache is not None and "mv" in cache:
            m, v = cache["mv"]
        else:
            m = self.enc_m(xy)
            v = bounded_sigmoid(self.enc_v(xy), LATENT_STD_FLOOR)
            if cache is not None:
                cache["mv"] = (m, v)
        if variant == "ba":
            if not ad.grad_enabled() and which == "c":
                mean, var = kernels.ba_batch(
                    ad.as_array(m)[packed.ctx_rows], ad.as_array(v)[packed.ctx_rows],
                    packed.ctx_offsets, 0.0, 1.0,
                )
                return Posterior(mean, var)
            mean, var = ba_batched(m, v, seg, 0.0, 1.0)
            return Posterior(mean, var)
        if variant == "mba":
            log_w_prior, means, vars_ = self.mixture_prior()
            log_w, mean, var, _ = mba_batched(m, v, seg, log_w_prior, means, vars_)
            return Posterior(mean, var, log_w)
        steps = cavi_steps or self.config.cavi_steps
        rp = self.gamma_prior()
        if not ad.grad_enabled() and which == "c":
            a0, b0, c0 = (float(ad.as_array(h)) for h in (rp.a0, rp.b0, rp.c0))
            mean, var, a, b, c, d, elbo = kernels.rba_batch(
                ad.as_array(m)[packed.ctx_rows], ad.as_array(v)[packed.ctx_rows],
                packed.ctx_offsets, a0, b0, c0, steps, record_bound,
            )
            post = Posterior(mean, var)
            post.extra.update(a=a, b=b, c=c, d=d)
            if record_bound:
                post.extra["bound"] = elbo
            return post
        out = rba_batched(m, v, seg, rp, steps, record_elbo=record_bound)
        post = Posterior(out["mean"], out["var"])
        post.extra.update({k: out[k] for k in ("a", "b", "c", "d")})
        if record_bound:
            post.extra["bound"] = out["elbo"]
        return post

    # -- decoder --------------------------------------------------------------------
    def decode(self, z, x):
        """Predictive mean and std at inputs ``x`` given latents ``z``.

        ``z`` has shape ``(..., N, D)`` matched row-by-row with ``x`` ``(N,)``,
        or ``(D,)`` to share one latent across all inputs.
        """
        x = np.reshape(np.asarray(x, dtype=np.float64), (-1, 1))
        z_arr = ad.as_array(z)
        if z_arr.shape[-1] != self.config.latent_dim:
            raise ValueError(f"latent has dimension {z_arr.shape[-1]}, model uses {self.config.latent_dim}")
        if z_arr.ndim == 1:
            z = ad.reshape(z, (1, -1)) + np.zeros((len(x), 1))
            z_arr = ad.as_array(z)
        xb = np.broadcast_to(x, z_arr.shape[:-1] + (1,))
        inp = ad.concat([xb, z], axis=-1)
        mean = self.dec_mean(inp)[..., 0]
        std = bounded_softplus(self.dec_std(inp)[..., 0], PRED_STD_FLOOR)
        return mean, std

    def _predict_rows(self, z, packed: Packed, rows, tasks):
        """Decoder outputs for selected point rows; ``z`` is ``(S, B, D)``."""
        z_rows = ad.getitem(z, (slice(None), tasks))
        return self.decode(z_rows, packed.x[rows, 0])

    # -- objective --------------------------------------------------------------------
    def elbo(self, packed: Packed, n_samples: int, rng: np.random.Generator):
        """Per-task ELBO ``(B,)``: expected target log-likelihood under
        ``q(z | C u T)`` minus ``KL(q(z | C u T) || q(z | C))``."""
        if n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        cache: dict = {}
        q_ct = self.posterior(packed, "ct", cache=cache)
        q_c = self.posterior(packed, "c", cache=cache)
        z = q_ct.sample(rng, n_samples)
        mean, std = self._predict_rows(z, packed, packed.tgt_rows, packed.tgt_task)
        y = packed.y[packed.tgt_rows, 0]
        ll = -0.5 * (LOG_2PI + 2.0 * ad.log(std) + ((y - mean) / std) ** 2)  # (S, P_t)
        expected_ll = ad.mean(ad.matmul(ll, packed.seg_t.T), axis=0)  # (B,)
        if q_ct.is_mixture:
            kl = ad.mean(q_ct.log_density(z) - q_c.log_density(z), axis=0)
        else:
            kl = diag_kl(q_ct.mean, q_ct.var, q_c.mean, q_c.var)
        return expected_ll - kl

    def loss(self, packed: Packed, n_samples: int, rng: np.random.Generator):
        return -ad.mean(self.elbo(packed, n_samples, rng))

    # -- prediction -------------------------------------------------------------------
    def predict(self, packed: Packed, rng: np.random.Generator, n_samples: int,
                cavi_steps: Optional[int] = None, record_bound: bool = False):
        """Sample latents from ``q(z | C)`` and decode every point of every task."""
        with ad.no_grad():
            post = self.posterior(packed, "c", cavi_steps=cavi_steps, record_bound=record_bound)
            z = post.sample(rng, n_samples)
            rows = np.arange(len(packed.x))
            tasks = np.repeat(np.arange(len(packed.all_offsets) - 1), np.diff(packed.all_offsets))
            mean, std = self._predict_rows(z, packed, rows, tasks)
        return ad.as_array(mean), ad.as_array(std), post


def pack_tasks(tasks) -> Packed:
    if isinstance(tasks, Task):
        tasks = [tasks]
    if isinstance(tasks, TaskBatch):
        tasks = tasks.tasks
    return pack(tasks)
