"""Run orchestration shared by the command line and the acceptance tests."""
from __future__ import annotations

import csv
import json
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .model import NeuralProcess
from .taskgen import corrupt_batch, make_eval_set
from .training import evaluate, save_model, train, write_metrics

EVAL_COLUMNS = (
    "variant", "seed", "family", "gamma", "cavi_steps", "n_tasks",
    "pred_ll_target", "pred_ll_target_std", "rmse_target", "rmse_target_std",
    "pred_ll_context", "pred_ll_context_std", "rmse_context", "rmse_context_std", "bound",
)


def seed_suffix(seed: int, n_seeds: int) -> str:
    return "" if n_seeds == 1 else f"_seed{seed}"


def eval_tasks(cfg: RunConfig, gamma: float = 0.0):
    """Frozen evaluation set; its seed does not depend on the training seed."""
    tasks = make_eval_set(cfg.family, cfg.eval_tasks, cfg.eval_seed)
    return corrupt_batch(tasks, gamma, cfg.eval_seed) if gamma > 0 else tasks


def train_one(cfg: RunConfig, seed: int, out_dir, n_seeds: int = 1, eval_at_end: bool = True) -> dict:
    """Train one seed and write ``metrics*.csv`` and ``checkpoint*.npz``.

    The metric file holds the periodic training rows followed by one ``eval``
    row on the clean evaluation set. Per-step wall times go to a separate
    ``timing*.csv`` so the metric file stays byte-reproducible.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sfx = seed_suffix(seed, n_seeds)
    model = NeuralProcess(cfg.model_config(), seed=seed)
    t0 = time.perf_counter()
    result = train(
        model, cfg.family, cfg.steps, batch_size=cfg.batch_size, n_samples=cfg.latent_samples(),
        seed=seed, lr=cfg.lr, log_every=cfg.log_every, dump_dir=out_dir, record_wall=cfg.record_wall_time,
    )
    train_s = time.perf_counter() - t0
    rows = list(result.rows)
    if eval_at_end:
        summary = evaluate(model, eval_tasks(cfg), n_samples=cfg.eval_samples, seed=seed)["summary"]
        rows.append({"step": cfg.steps, "split": "eval", "variant": cfg.variant, "seed": seed,
                     **{k: summary[k] for k in ("pred_ll_target", "rmse_target", "pred_ll_context", "rmse_context")}})
    metrics = write_metrics(out_dir / f"metrics{sfx}.csv", rows)
    ckpt = save_model(out_dir / f"checkpoint{sfx}.npz", model, {"seed": seed, "run": cfg.to_dict()})
    timing = out_dir / f"timing{sfx}.csv"
    with open(timing, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "wall_ms"])
        for i, ms in enumerate(result.step_ms):
            w.writerow([i + 1, f"{ms:.3f}"])
    return {"seed": seed, "metrics": metrics, "checkpoint": ckpt, "timing": timing,
            "train_seconds": train_s, "final_loss": result.losses[-1] if result.losses else float("nan")}


def write_config_snapshot(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.json"
    path.write_text(cfg.to_json() + "\n")
    return path


def eval_rows(model: NeuralProcess, cfg: RunConfig, seed: int, gammas: Sequence[float],
              cavi_steps: Optional[Sequence[int]] = None, per_task: bool = False):
    """Summary rows per (corruption level, CAVI steps).

    ``cavi_steps`` only applies to the robust variant; other variants get a
    single row per level with an empty ``cavi_steps`` cell. With ``per_task``
    the raw per-task arrays are returned alongside.
    """
    variant = model.config.variant
    steps_list = list(cavi_steps) if (variant == "rba" and cavi_steps) else [None]
    rows, raw = [], []
    base = make_eval_set(cfg.family, cfg.eval_tasks, cfg.eval_seed)
    for gamma in gammas:
        tasks = corrupt_batch(base, gamma, cfg.eval_seed) if gamma > 0 else base
        for steps in steps_list:
            res = evaluate(model, tasks, n_samples=cfg.eval_samples, seed=seed,
                           cavi_steps=steps, record_bound=variant == "rba")
            s = res["summary"]
            used = steps if steps is not None else (model.config.cavi_steps if variant == "rba" else "")
            row = {"variant": variant, "seed": seed, "family": cfg.family, "gamma": float(gamma),
                   "cavi_steps": used, "n_tasks": len(tasks), "bound": s.get("bound", "")}
            row.update({k: v for k, v in s.items() if k in EVAL_COLUMNS})
            rows.append(row)
            raw.append(res["per_task"])
    return (rows, raw) if per_task else rows


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_eval(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in EVAL_COLUMNS])
    return path


def read_eval(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def dump_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path
