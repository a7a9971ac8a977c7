"""Training loop, evaluation metrics and the metrics CSV stream."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import special

from . import autodiff as ad
from .model import NeuralProcess, pack
from .nn import Adam, load_checkpoint, save_checkpoint
from .taskgen import TaskBatch, make_batch, write_tasks

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step", "split", "variant", "seed", "elbo",
    "pred_ll_target", "rmse_target", "pred_ll_context", "rmse_context", "wall_ms",
)


class NumericalAbort(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass
class TrainResult:
    model: NeuralProcess
    rows: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    step_ms: list = field(default_factory=list)


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_metrics(path, rows, append: bool = False) -> Path:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
    return path


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "split" not in reader.fieldnames:
            raise ValueError(f"{path}: malformed metrics CSV")
        return list(reader)


def train(model: NeuralProcess, family: str, steps: int, batch_size: int = 16, n_samples: int = 5,
          seed: int = 0, lr: float = 5e-4, log_every: int = 100, dump_dir: Optional[Path] = None,
          record_wall: bool = False) -> TrainResult:
    """Maximize the mean per-task ELBO with Adam and a cosine schedule.

    Every batch and latent draw derives from ``(seed, step)`` so that reruns
    reproduce the loss trace bit for bit. ``wall_ms`` is only written into
    metric rows when ``record_wall`` is set; per-step timings are always kept
    in ``TrainResult.step_ms``.
    """
    opt = Adam(model.params, lr=lr, horizon=steps)
    result = TrainResult(model)
    variant = model.config.variant
    window = []
    for step in range(steps):
        t0 = time.perf_counter()
        batch = make_batch(family, batch_size, seed, step)
        packed = pack(batch)
        loss = model.loss(packed, n_samples, np.random.default_rng([4, seed, step]))
        value = float(loss.data)
        if not np.isfinite(value):
            if dump_dir is not None:
                write_tasks(Path(dump_dir) / f"nan_batch_step{step}.csv", batch, seed=seed, step=step)
            raise NumericalAbort(f"non-finite loss {value} at step {step} (seed {seed}, variant {variant})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        elapsed = (time.perf_counter() - t0) * 1000.0
        result.losses.append(value)
        result.step_ms.append(elapsed)
        window.append(-value)
        if (step + 1) % log_every == 0 or step == steps - 1:
            row = {"step": step + 1, "split": "train", "variant": variant, "seed": seed,
                   "elbo": float(np.mean(window))}
            if record_wall:
                row["wall_ms"] = float(np.sum(result.step_ms[-len(window):]))
            result.rows.append(row)
            log.info("step %d elbo %.4f", step + 1, row["elbo"])
            window = []
    return result


def _logmeanexp(x, axis=0):
    return special.logsumexp(x, axis=axis) - np.log(x.shape[axis])


def evaluate(model: NeuralProcess, tasks: TaskBatch, n_samples: int = 32, seed: int = 0,
             cavi_steps: Optional[int] = None, chunk: int = 100, record_bound: bool = False) -> dict:
    """Monte-Carlo predictive log-likelihood and RMSE, per task, for both roles.

    Per-point log-likelihood is the log-mean-exp over latent samples of the
    Gaussian predictive density; it is averaged over the points of each task.
    RMSE compares targets with the sample-averaged predictive mean. Summaries
    are mean and standard deviation across tasks.
    """
    if len(tasks) == 0:
        raise ValueError("empty evaluation set")
    per = {k: [] for k in ("pred_ll_target", "rmse_target", "pred_ll_context", "rmse_context")}
    bounds = []
    for start in range(0, len(tasks), chunk):
        sub = tasks.tasks[start : start + chunk]
        packed = pack(sub)
        rng = np.random.default_rng([5, seed, start])
        mean, std, post = model.predict(packed, rng, n_samples, cavi_steps=cavi_steps, record_bound=record_bound)
        y = packed.y[:, 0]
        lp = -0.5 * (np.log(2 * np.pi) + 2 * np.log(std) + ((y - mean) / std) ** 2)  # (S, P)
        ll = _logmeanexp(lp, axis=0)
        sq = (y - mean.mean(axis=0)) ** 2
        for b in range(len(sub)):
            o, e = packed.all_offsets[b], packed.all_offsets[b + 1]
            nc = packed.n_context[b]
            per["pred_ll_context"].append(ll[o : o + nc].mean())
            per["rmse_context"].append(np.sqrt(sq[o : o + nc].mean()))
            per["pred_ll_target"].append(ll[o + nc : e].mean())
            per["rmse_target"].append(np.sqrt(sq[o + nc : e].mean()))
        if record_bound and "bound" in post.extra:
            bounds.append(post.extra["bound"])
    out = {k: np.array(v) for k, v in per.items()}
    summary = {}
    for k, v in out.items():
        summary[k] = float(v.mean())
        summary[k + "_std"] = float(v.std())
    if bounds:
        out["bound"] = np.concatenate(bounds, axis=0)
        summary["bound"] = float(out["bound"][:, -1].mean())
    return {"per_task": out, "summary": summary}


# -- checkpoints --------------------------------------------------------------------
def save_model(path, model: NeuralProcess, meta: dict) -> Path:
    meta = dict(meta)
    meta["model"] = model.config.to_dict()
    return save_checkpoint(path, model.params, meta)


def load_model(path):
    from .model import ModelConfig

    params, meta, _ = load_checkpoint(path)
    model = NeuralProcess(ModelConfig(**meta["model"]), seed=meta.get("seed", 0))
    model.load_state_dict(params)
    return model, meta


def no_grad_elbo(model: NeuralProcess, tasks: TaskBatch, n_samples: int, seed: int) -> np.ndarray:
    with ad.no_grad():
        return ad.as_array(model.elbo(pack(tasks.tasks), n_samples, np.random.default_rng([6, seed])))
