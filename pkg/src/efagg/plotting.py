"""SVG line plots from metric and evaluation CSV files."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class PlotError(ValueError):
    pass


def _read(path) -> list:
    path = Path(path)
    if not path.exists():
        raise PlotError(f"{path} does not exist")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        cols = reader.fieldnames or []
    if not cols or not rows:
        raise PlotError(f"{path}: no data rows")
    if "variant" not in cols:
        raise PlotError(f"{path}: missing 'variant' column")
    return rows


def _num(s):
    return float(s) if s not in ("", None) else None


def _series(rows, x_key, y_key, group_keys):
    groups = defaultdict(list)
    for r in rows:
        x, y = _num(r.get(x_key)), _num(r.get(y_key))
        if x is None or y is None:
            continue
        label = " ".join(f"{k}={r[k]}" if k != "variant" else r[k] for k in group_keys if r.get(k, "") != "")
        groups[label].append((x, y))
    return {k: sorted(v) for k, v in sorted(groups.items())}


def _draw(ax, series, xlabel, ylabel):
    for label, pts in series.items():
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", ms=3, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(fontsize=8)


def plot_kind(rows) -> str:
    cols = rows[0].keys()
    if "gamma" in cols:
        steps = {r["cavi_steps"] for r in rows if r.get("cavi_steps")}
        gammas = {r["gamma"] for r in rows}
        if len(steps) > 1 and len(gammas) == 1:
            return "steps"
        return "corruption"
    if "split" in cols:
        return "training"
    raise PlotError("unrecognized CSV layout")


def plot_file(path, out_path) -> Path:
    """Render one CSV into one SVG; the layout picks the plot type.

    Evaluation files become pred_ll against corruption level, or pred_ll and
    the evidence bound against CAVI steps when only the step count varies.
    Training metric files become ELBO against step.
    """
    rows = _read(path)
    kind = plot_kind(rows)
    if kind == "training":
        fig, ax = plt.subplots(figsize=(5, 3.5))
        train_rows = [r for r in rows if r["split"] == "train"]
        series = _series(train_rows, "step", "elbo", ("variant", "seed"))
        if not series:
            plt.close(fig)
            raise PlotError(f"{path}: no training rows with an elbo value")
        _draw(ax, series, "step", "training ELBO")
    elif kind == "corruption":
        fig, ax = plt.subplots(figsize=(5, 3.5))
        by_steps = len({r["cavi_steps"] for r in rows}) > 1
        keys = ("variant", "cavi_steps") if by_steps else ("variant",)
        _draw(ax, _series(_seed_mean(rows, ("variant", "cavi_steps", "gamma")), "gamma", "pred_ll_target", keys),
              "corruption scale", "target pred. log-lik.")
    else:
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        agg = _seed_mean(rows, ("variant", "gamma", "cavi_steps"))
        _draw(axes[0], _series(agg, "cavi_steps", "pred_ll_target", ("variant",)),
              "CAVI steps", "target pred. log-lik.")
        bound = _series(agg, "cavi_steps", "bound", ("variant",))
        if bound:
            _draw(axes[1], bound, "CAVI steps", "evidence lower bound")
        else:
            axes[1].set_axis_off()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path


def _seed_mean(rows, keys):
    """Average numeric columns over seeds for rows sharing ``keys``."""
    groups = defaultdict(list)
    for r in rows:
        groups[tuple(r.get(k, "") for k in keys)].append(r)
    out = []
    for key, members in groups.items():
        row = dict(zip(keys, key))
        for col in ("pred_ll_target", "bound"):
            vals = [_num(m.get(col)) for m in members]
            vals = [v for v in vals if v is not None]
            row[col] = str(sum(vals) / len(vals)) if vals else ""
        out.append(row)
    return out


def plot_files(paths, out_dir) -> list:
    """One SVG per input file, written as ``<out_dir>/<stem>.svg``.

    Every input is validated before anything is written.
    """
    for p in paths:
        plot_kind(_read(p))
    return [plot_file(p, Path(out_dir) / (Path(p).stem + ".svg")) for p in paths]
