"""``efagg`` command line: train, eval, verify and plot."""
from __future__ import annotations

import argparse
import cProfile
import logging
import os
import pstats
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import experiment
from .config import ConfigError, RunConfig, load_config, merged_fields
from .model import VARIANTS
from .training import NumericalAbort, load_model

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("efagg")


def parse_int_list(text: str) -> list:
    """``"3"``, ``"1,2,5"`` or an inclusive range ``"1..10"``."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ConfigError(f"empty range {text!r}")
            return list(range(lo, hi + 1))
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse integer list {text!r}") from None


def parse_float_list(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse number list {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (flat, or with 'presets'/'run' sections)")
    p.add_argument("--preset", help="named preset, e.g. desk-rbf or paper-matern")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--k", type=int, help="mixture components")
    p.add_argument("--cavi-steps", help="CAVI sweeps: N, a list '1,2,5' or a range '1..10'")
    p.add_argument("--seed", help="seed, list '0,1,2' or range '0..4' (default: $EFAGG_SEED or 0)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="efagg", description="Neural processes with Bayesian context aggregation.")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train one model per seed")
    _common(tr)
    tr.add_argument("--steps", type=int)
    tr.add_argument("--family", help="task family: rbf, matern or rbf-flip")
    tr.add_argument("--parallel-seeds", type=int, default=1, metavar="N", help="train N seeds concurrently")
    tr.add_argument("--profile", action="store_true", help="write cProfile statistics to profile.txt")

    ev = sub.add_parser("eval", help="evaluate checkpoints on the frozen evaluation set")
    _common(ev)
    ev.add_argument("--checkpoint", type=Path, nargs="+", help="checkpoint files (default: all in --out)")
    ev.add_argument("--corrupt", choices=["student-t"], help="corrupt context outputs")
    ev.add_argument("--gammas", help="corruption scales, e.g. 0.05,0.15 (default: config grid)")
    ev.add_argument("--eval-tasks", type=int)

    ve = sub.add_parser("verify", help="run the oracle check suite")
    ve.add_argument("--profile", choices=["quick", "full"], default="quick", help="instance counts per check")
    ve.add_argument("--seed", type=int, default=0)
    ve.add_argument("--only", nargs="+", help="run checks whose name contains any of these strings")
    ve.add_argument("--out", type=Path, help="directory for verify.csv (default: current directory)")

    pl = sub.add_parser("plot", help="render CSV files to SVG")
    pl.add_argument("files", type=Path, nargs="+")
    pl.add_argument("--out", type=Path, help="output directory (default: next to each input)")
    return parser


def _seeds(args) -> list | None:
    if args.seed is not None:
        return parse_int_list(args.seed)
    return None


def resolve_config(args, **extra) -> RunConfig:
    overrides = {"variant": args.variant, "k": args.k, **extra}
    if args.cavi_steps is not None:
        steps = parse_int_list(args.cavi_steps)
        if len(steps) != 1:
            raise ConfigError("training takes a single --cavi-steps value")
        overrides["cavi_steps"] = steps[0]
    seeds = _seeds(args)
    if seeds is None and os.environ.get("EFAGG_SEED") and "seeds" not in merged_fields(args.config, args.preset):
        seeds = parse_int_list(os.environ["EFAGG_SEED"])
    overrides["seeds"] = seeds
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    return load_config(args.config, args.preset, overrides)


def _train_task(payload):
    cfg_dict, seed, out_dir, n_seeds = payload
    return experiment.train_one(RunConfig.from_dict(cfg_dict), seed, out_dir, n_seeds)


def cmd_train(args) -> int:
    cfg = resolve_config(args, steps=args.steps, family=args.family)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    experiment.write_config_snapshot(cfg, out)
    n = len(cfg.seeds)
    jobs = [(cfg.to_dict(), s, out, n) for s in cfg.seeds]
    profiler = cProfile.Profile() if args.profile else None
    if profiler:
        profiler.enable()
    if args.parallel_seeds > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=args.parallel_seeds) as pool:
            results = list(pool.map(_train_task, jobs))
    else:
        results = [_train_task(j) for j in jobs]
    if profiler:
        profiler.disable()
        with open(out / "profile.txt", "w") as fh:
            pstats.Stats(profiler, stream=fh).sort_stats("cumulative").print_stats(40)
    for r in results:
        print(f"seed {r['seed']}: final loss {r['final_loss']:.4f} in {r['train_seconds']:.1f}s -> {r['metrics']}")
    return EXIT_OK


def _checkpoints(args) -> list:
    if args.checkpoint:
        paths = list(args.checkpoint)
    elif args.out is not None:
        paths = sorted(args.out.glob("checkpoint*.npz"))
    else:
        raise ConfigError("eval needs --checkpoint or an --out directory containing checkpoints")
    missing = [str(p) for p in paths if not p.exists()]
    if missing or not paths:
        raise ConfigError(f"checkpoint not found: {', '.join(missing) or args.out}")
    return paths


def cmd_eval(args) -> int:
    rows = []
    out_dir = args.out
    for path in _checkpoints(args):
        model, meta = load_model(path)
        cfg = RunConfig.from_dict(meta["run"])
        requested = args.variant or merged_fields(args.config, args.preset).get("variant")
        if requested is not None and requested != cfg.variant:
            raise ConfigError(f"checkpoint {path} holds a {cfg.variant!r} model but the config asks for {requested!r}")
        if args.eval_tasks is not None:
            cfg.eval_tasks = args.eval_tasks
        gammas = [0.0]
        if args.corrupt:
            gammas = parse_float_list(args.gammas) if args.gammas else list(cfg.corruption_grid)
        elif args.gammas:
            raise ConfigError("--gammas requires --corrupt student-t")
        if any(g < 0 for g in gammas):
            raise ConfigError("corruption scales must be non-negative")
        steps = parse_int_list(args.cavi_steps) if args.cavi_steps else None
        seed = meta.get("seed", 0)
        if args.seed is not None:
            seed = parse_int_list(args.seed)[0]
        rows += experiment.eval_rows(model, cfg, seed, gammas, steps)
        out_dir = out_dir or Path(path).parent
    out = experiment.write_eval(Path(out_dir) / "eval.csv", rows)
    for r in rows:
        print(f"{r['variant']:>4} seed {r['seed']} gamma {r['gamma']:.2f} steps {str(r['cavi_steps']):>3}  "
              f"target ll {r['pred_ll_target']:.4f} +/- {r['pred_ll_target_std']:.4f}  "
              f"rmse {r['rmse_target']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verification import format_table, run_checks, write_report

    results = run_checks(args.profile, seed=args.seed, only=args.only)
    if not results:
        raise ConfigError("no checks selected")
    print(format_table(results))
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    print(f"wrote {write_report(results, out / 'verify.csv')}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_plot(args) -> int:
    from .plotting import PlotError, plot_files

    try:
        if args.out is not None:
            outs = plot_files(args.files, args.out)
        else:
            outs = [p for f in args.files for p in plot_files([f], f.parent)]
    except PlotError as exc:
        raise ConfigError(str(exc)) from exc
    for o in outs:
        print(f"wrote {o}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "verify": cmd_verify, "plot": cmd_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"efagg: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"efagg: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
