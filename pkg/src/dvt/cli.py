"""``dvt`` command line: train, eval, trace, solve, sweep, infer, flops.

Exit status: 0 success, 1 usage/config error, 2 data or file-format error,
3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import budget as B
from .cascade import NumericError, cumulative_flops, flops_estimate, infer_adaptive, infer_all_exits, init_cascade
from .cascade import measure_stage_flops
from .config import ConfigError, RunConfig, cascade_config, check_image_size, ga_config, load_config
from .data import DataError, load_dataset, train_val_split
from .storage import FormatError, export_trace, import_trace, load_checkpoint, save_checkpoint
from .train import exit_accuracies, train_cascade

log = logging.getLogger("dvt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _data_dir(explicit, run: RunConfig | None = None) -> str:
    d = explicit or (run.dataset.dir if run else None) or os.environ.get("DVT_DATA_DIR")
    if not d:
        raise UsageError("no dataset directory: pass --data-dir, set dataset.dir, or export DVT_DATA_DIR")
    return d


def _dataset_name(config) -> str:
    return "mnist" if config.channels == 1 else "cifar10"


@contextlib.contextmanager
def _outputs(*paths):
    """Remove any listed output that a failing command left behind."""
    fresh = [Path(p) for p in paths if p is not None and not Path(p).exists()]
    try:
        yield
    except BaseException:
        for p in fresh:
            with contextlib.suppress(OSError):
                p.unlink()
        raise


def _split(name: str, data_dir: str, split: str, seed: int, val_fraction: float):
    """``train``/``val`` come from the seeded hold-out of the training files."""
    if split == "test":
        return load_dataset(name, data_dir, "test")
    train, val = train_val_split(load_dataset(name, data_dir, "train"), val_fraction, seed)
    return train if split == "train" else val


def _parse_thresholds(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    if Path(text).is_file():
        return [float(x) for x in json.loads(Path(text).read_text())["thresholds"]]
    try:
        return [float(x) for x in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"thresholds must be comma-separated numbers or a solve output file: {text!r}") from exc


def _resolve_budget(trace: B.ExitTrace, budget, fraction) -> float:
    if (budget is None) == (fraction is None):
        raise UsageError("give exactly one of --budget or --budget-fraction")
    if budget is not None:
        return float(budget)
    return float(fraction) * trace.exit_mean_flops(trace.num_exits - 1)


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    run = load_config(args.config, args.overrides)
    if run.train.seed is None:
        raise UsageError("train.seed is required (set it in the config or pass --train.seed N)")
    config = cascade_config(run)
    check_image_size(run, config)
    data_dir = _data_dir(args.data_dir, run)
    seed = run.train.seed
    with _outputs(args.out):
        full = load_dataset(run.dataset.name, data_dir, "train")
        train, val = train_val_split(full, run.train.val_fraction, seed)
        log.info("training on %d images, %d held out", len(train), len(val))
        params, history = train_cascade(
            config,
            train,
            seed=seed,
            epochs=run.train.epochs,
            batch=run.train.batch,
            lr=run.train.lr,
            augment_policy=run.dataset.augment,
            monitor=val if len(val) else None,
            on_epoch=lambda r: print(
                f"epoch {r.epoch} loss {r.mean_loss:.4f} "
                + " ".join(f"exit{i + 1} {a:.4f}" for i, a in enumerate(r.exit_accuracy)),
                flush=True,
            ),
        )
        save_checkpoint(params, config, args.out, seed=seed)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, config, seed = load_checkpoint(args.checkpoint)
    ds = _split(_dataset_name(config), _data_dir(args.data_dir), args.split, seed, args.val_fraction)
    for i, acc in enumerate(exit_accuracies(params, config, ds)):
        print(f"exit {i + 1}: accuracy {acc:.4f}")
    return EXIT_OK


def cmd_trace(args) -> int:
    params, config, seed = load_checkpoint(args.checkpoint)
    ds = _split(_dataset_name(config), _data_dir(args.data_dir), args.split, seed, args.val_fraction)
    with _outputs(args.out):
        trace = infer_all_exits(ds.images, params, config).to_trace(ds.labels)
        export_trace(trace, args.out)
    print(f"wrote {args.out}: {trace.num_samples} samples, {trace.num_exits} exits")
    return EXIT_OK


def _solve(trace, budget, method, resolution, ga):
    if method == "grid":
        return B.solve_grid(trace, budget, resolution)
    return B.solve_ga(trace, budget, ga)


def _solver_settings(args):
    run = load_config(args.config, args.overrides)
    method = args.method or run.solve.method
    resolution = args.resolution or run.solve.resolution
    seed = args.seed if args.seed is not None else (run.solve.ga.seed if run.solve.ga.seed is not None else run.train.seed)
    if method == "ga" and seed is None:
        raise UsageError("the GA solver needs a seed (--seed, solve.ga.seed or train.seed)")
    return run, method, resolution, ga_config(run, seed if seed is not None else 0, resolution)


def cmd_solve(args) -> int:
    run, method, resolution, ga = _solver_settings(args)
    trace = import_trace(args.trace)
    b = args.budget if args.budget is not None else run.solve.budget
    f = args.budget_fraction if args.budget_fraction is not None else run.solve.budget_fraction
    budget = _resolve_budget(trace, b, f)
    sol = _solve(trace, budget, method, resolution, ga)
    result = {
        "budget": budget,
        "method": method,
        "thresholds": [float(x) for x in sol.thresholds],
        "accuracy": sol.accuracy,
        "mean_flops": sol.mean_flops,
        "feasible": bool(sol.feasible),
    }
    if args.out:
        with _outputs(args.out):
            Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
    print(
        f"{method}: thresholds {','.join(f'{x:.6g}' for x in result['thresholds']) or '-'} "
        f"accuracy {sol.accuracy:.4f} mean_flops {sol.mean_flops:.6g} budget {budget:.6g}"
        + ("" if sol.feasible else " (INFEASIBLE: cheapest policy returned)")
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    run, method, resolution, ga = _solver_settings(args)
    trace = import_trace(args.trace)
    if (args.budgets is None) == (args.fractions is None):
        raise UsageError("give exactly one of --budgets or --fractions")
    if args.budgets is not None:
        budgets = [float(x) for x in args.budgets.split(",")]
    else:
        final = trace.exit_mean_flops(trace.num_exits - 1)
        budgets = [float(x) * final for x in args.fractions.split(",")]
    try:
        points = B.budget_sweep(trace, budgets, method, resolution, ga)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    k = trace.num_exits
    with _outputs(args.out):
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["budget", "accuracy", "mean_flops"] + [f"eta_{i + 1}" for i in range(k - 1)])
            for p in points:
                w.writerow([repr(p.budget), repr(p.accuracy), repr(p.mean_flops)] + [repr(float(x)) for x in p.thresholds])
    print(f"wrote {args.out}: {len(points)} points")
    return EXIT_OK


def cmd_infer(args) -> int:
    params, config, seed = load_checkpoint(args.checkpoint)
    ds = _split(_dataset_name(config), _data_dir(args.data_dir), args.split, seed, args.val_fraction)
    try:
        res = infer_adaptive(ds.images, params, config, _parse_thresholds(args.thresholds))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    n = len(ds)
    print(f"accuracy {np.mean(res.labels == ds.labels):.4f}  mean_flops {res.cumulative_flops.mean():.6g}")
    counts = np.bincount(res.exit_index, minlength=config.num_stages)
    for i, c in enumerate(counts):
        print(f"exit {i + 1}: {c} samples ({100.0 * c / n:.2f}%)")
    return EXIT_OK


def cmd_flops(args) -> int:
    run = load_config(args.config, args.overrides)
    config = cascade_config(run)
    check_image_size(run, config)
    cum = cumulative_flops(config)
    measured = measure_stage_flops(init_cascade(config, 0), config) if args.measure else None
    header = f"{'stage':>5} {'grid':>7} {'tokens':>6} {'stage_flops':>14} {'cumulative':>14}"
    print(header + (f" {'measured':>14}" if measured else ""))
    for i, g in enumerate(config.grids):
        row = f"{i + 1:>5} {g.grid_h}x{g.grid_w:<5} {g.num_tokens:>6} {flops_estimate(config, i):>14d} {cum[i]:>14d}"
        print(row + (f" {measured[i]:>14d}" if measured else ""))
    return EXIT_OK


# -------------------------------------------------------------------- parser


def _add_data(p, split_default="test"):
    p.add_argument("--data-dir", help="dataset directory (default: $DVT_DATA_DIR)")
    p.add_argument("--split", choices=["train", "val", "test"], default=split_default)
    p.add_argument("--val-fraction", type=float, default=0.1, help="hold-out fraction used for 'val'/'train'")


def _add_config(p):
    p.add_argument("--config", help="JSON run config (defaults: MNIST cascade)")
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="SECTION.KEY=VALUE")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dvt", description="Token-cascade vision transformer with early exits.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train a cascade and write a checkpoint")
    _add_config(s)
    s.add_argument("--data-dir")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-exit accuracy of a checkpoint")
    s.add_argument("checkpoint")
    _add_data(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("trace", help="record every exit's prediction into a trace file")
    s.add_argument("checkpoint")
    s.add_argument("--out", required=True)
    _add_data(s)
    s.set_defaults(func=cmd_trace)

    for name, func, hlp in (("solve", cmd_solve, "solve thresholds for one budget"),
                            ("sweep", cmd_sweep, "solve a list of budgets and write a CSV curve")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("trace")
        _add_config(s)
        s.add_argument("--method", choices=["grid", "ga"])
        s.add_argument("--resolution", type=float)
        s.add_argument("--seed", type=int)
        if name == "solve":
            s.add_argument("--budget", type=float, help="mean FLOPs per image")
            s.add_argument("--budget-fraction", type=float, help="fraction of final-exit mean FLOPs")
            s.add_argument("--out", help="JSON result path")
        else:
            s.add_argument("--budgets", help="comma-separated ascending mean-FLOPs budgets")
            s.add_argument("--fractions", help="comma-separated ascending fractions of final-exit cost")
            s.add_argument("--out", required=True, help="CSV path")
        s.set_defaults(func=func)

    s = sub.add_parser("infer", help="early-exit inference with given thresholds")
    s.add_argument("checkpoint")
    s.add_argument("--thresholds", required=True, help="comma list eta_1..eta_{K-1}, or a solve JSON file")
    _add_data(s)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("flops", help="analytic per-stage FLOPs table")
    _add_config(s)
    s.add_argument("--measure", action="store_true", help="also count matmul FLOPs on a random image")
    s.set_defaults(func=cmd_flops)
    return p


def _split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Pull ``--section.key value`` / ``--section.key=value`` out of argv."""
    rest, overrides = [], []
    i = 0
    while i < len(argv):
        a = argv[i]
        if a.startswith("--") and "." in a.split("=", 1)[0] and not a[2:3].isdigit():
            key = a[2:]
            if "=" in key:
                overrides.append(key)
            else:
                if i + 1 >= len(argv):
                    raise UsageError(f"override {a} needs a value")
                overrides.append(f"{key}={argv[i + 1]}")
                i += 1
        else:
            rest.append(a)
        i += 1
    return rest, overrides


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv, overrides = _split_overrides(argv)
    except UsageError as exc:
        print(f"dvt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    args.overrides = getattr(args, "sets", []) + overrides
    if args.overrides and not hasattr(args, "sets"):
        print(f"dvt: error: {args.command} takes no config overrides", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"dvt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataError, FormatError, B.TraceError) as exc:
        print(f"dvt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"dvt: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
