# main.py
"""
lossscope command line.

  python main.py gen-data --out data/
  python main.py pretrain --data data/ --out runs/pretrain
  python main.py train --data data/ --task regime --init runs/pretrain --out runs/ft-regime
  python main.py surface --theta0 runs/pretrain --theta1 runs/ft-regime --theta2 runs/ft-motif \
      --data data/ --task regime --out regime.grid
  python main.py render regime.grid --out regime.svg
  python main.py repro fig7

Messages go to stderr; results go only to the files named on the command
line. Exit status: 0 ok, 1 usage error, 2 data or compute error.
"""

import argparse
import contextlib
import os
import sys
from dataclasses import replace

from checkpoint_io import is_run_dir, load_params, load_run, save_run
from config import load_config
from errors import LossscopeError, UsageError
from grid_io import detect_format, save_curve, save_surface, save_table, save_trajectory
from landscape import (
    DatasetLoss,
    GridSpec,
    curve_1d,
    error_surface,
    layer_surface,
    project_trajectory,
    rollback_table,
    surface_2d,
)
from param_space import diff, layer_thirds, parse_group, with_head_from
from render import RENDER_KINDS, RenderSpec, render_file, write_svg
from repro import RECIPES, repro
from synth_data import TASK_KINDS, gen_corpus, gen_task, load_corpus, load_task, save_corpus, save_task
from training import continue_run, finetune, pretrain, train_from_scratch

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _existing(path, what):
    if not os.path.exists(path):
        raise UsageError(f"{what} '{path}' does not exist")
    return path


def _load_point(path):
    """A .ckpt file, or a run directory (its final checkpoint)."""
    _existing(path, "checkpoint")
    if os.path.isdir(path):
        if not is_run_dir(path):
            raise UsageError(f"'{path}' is neither a checkpoint nor a run directory")
        return load_run(path).final
    return load_params(path)


def _load_task(args):
    _existing(args.data, "data directory")
    return load_task(args.data, args.task)


def _grid_spec(args, config, curve=False):
    spec = config.curve_spec() if curve else config.grid_spec()
    alpha = tuple(args.alpha_range) if args.alpha_range else spec.alpha_range
    beta = tuple(args.beta_range) if args.beta_range else spec.beta_range
    return GridSpec(alpha, beta, args.samples or spec.samples_per_axis)


def _subsample(args, config):
    return args.subsample if args.subsample is not None else config.subsample


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_gen_data(args, config):
    d = config.values["data"]
    seed = config.seed if args.seed is None else args.seed
    process = config.process()
    save_corpus(gen_corpus(seed, d["corpus_size"], process), args.out)
    save_corpus(gen_corpus(seed + 1, d["dev_corpus_size"], process), args.out, "dev_corpus")
    for kind in TASK_KINDS:
        save_task(gen_task(kind, seed, (d["train_size"], d["dev_size"]), process), args.out)
    print(f"Wrote corpus and tasks {', '.join(TASK_KINDS)} to '{args.out}'")


def cmd_pretrain(args, config):
    _existing(args.data, "data directory")
    train_config = config.train_config("pretrain", args.seed)
    if args.epochs:
        train_config = replace(train_config, epochs=args.epochs)
    dev_corpus = None
    if os.path.exists(os.path.join(args.data, "dev_corpus.meta.json")):
        dev_corpus = load_corpus(args.data, "dev_corpus")
    run = pretrain(load_corpus(args.data), train_config, config.model_config(), dev_corpus)
    save_run(run, args.out)


def cmd_train(args, config):
    if args.extend:
        if not args.extra_epochs:
            raise UsageError("--extend needs --extra-epochs")
        _existing(args.extend, "run directory")
        run = load_run(args.extend)
        if run.provenance == "pretrain":
            raise UsageError("use a fine-tuning or scratch run with --extend")
        run = continue_run(run, _load_task(args), args.extra_epochs)
        save_run(run, args.out)
        return
    stage = "finetune" if args.init else "scratch"
    train_config = config.train_config(stage, args.seed)
    if args.epochs:
        train_config = replace(train_config, epochs=args.epochs)
    task = _load_task(args)
    if args.init:
        run = finetune(_load_point(args.init), task, train_config)
    else:
        run = train_from_scratch(task, train_config, config.model_config())
    save_run(run, args.out)


def cmd_curve(args, config):
    theta0, theta1 = _load_point(args.theta0), _load_point(args.theta1)
    loss = DatasetLoss(_load_task(args).train, subsample=_subsample(args, config))
    curve = curve_1d(theta0, theta1, loss, _grid_spec(args, config, curve=True), args.workers or config.workers)
    save_curve(curve, args.out)
    print(f"Saved curve to '{args.out}'")


def cmd_surface(args, config):
    theta0, theta1, theta2 = (_load_point(p) for p in (args.theta0, args.theta1, args.theta2))
    task = _load_task(args)
    workers = args.workers or config.workers
    spec = _grid_spec(args, config)
    if args.command == "error-surface":
        grid = error_surface(theta0, theta1, theta2, task.dev, spec, workers, _subsample(args, config))
    else:
        loss = DatasetLoss(task.train, subsample=_subsample(args, config))
        grid = surface_2d(theta0, theta1, theta2, loss, spec, workers, anchor=args.anchor)
    save_surface(grid, args.out)
    print(f"Saved {grid.kind} surface to '{args.out}'")


def cmd_trajectory(args, config):
    _existing(args.run, "run directory")
    run = load_run(args.run)
    theta1 = _load_point(args.theta1) if args.theta1 else run.final
    projection = project_trajectory(run, _load_point(args.theta0), theta1)
    save_trajectory(projection, args.out)
    print(f"Saved {len(projection.points)} projected epochs to '{args.out}'")


def cmd_layer_surface(args, config):
    theta0, theta1, theta2 = (_load_point(p) for p in (args.theta0, args.theta1, args.theta2))
    group = parse_group(args.group, theta1.layout.num_layers)
    theta0 = with_head_from(theta0, theta1)
    delta1 = diff(theta1, theta0)
    delta2 = diff(with_head_from(theta2, theta1), theta0)
    loss = DatasetLoss(_load_task(args).train, subsample=_subsample(args, config))
    grid = layer_surface(theta1, delta1, delta2, group, loss, _grid_spec(args, config), args.workers or config.workers)
    save_surface(grid, args.out)
    print(f"Saved layer-group '{group.label}' surface to '{args.out}'")


def cmd_rollback(args, config):
    theta0, theta1 = _load_point(args.theta0), _load_point(args.theta1)
    num_layers = theta1.layout.num_layers
    if args.groups:
        groups = [parse_group(text, num_layers) for text in args.groups.split(";")]
    else:
        groups = list(layer_thirds(num_layers))
    table = rollback_table(theta1, theta0, groups, _load_task(args).dev)
    save_table(table, args.out)
    print(table.to_string(index=False))


def cmd_render(args, config):
    _existing(args.input, "input file")
    if args.overlay:
        _existing(args.overlay, "trajectory file")
    r = config.values["render"]
    levels = None
    if args.levels:
        try:
            levels = tuple(float(x) for x in args.levels.split(","))
        except ValueError:
            raise UsageError(f"--levels must be comma-separated numbers, got '{args.levels}'")
    kind = args.kind
    if kind is None:
        if detect_format(args.input) != "surface":
            kind = "curve"
        else:
            kind = "trajectory_overlay" if args.overlay else "contour"
    spec = RenderSpec(kind, args.cap, levels, r["width"], r["height"])
    svg = render_file(args.input, spec, args.overlay)
    write_svg(svg, args.out)
    print(f"Saved '{args.out}'")


def cmd_repro(args, config):
    repro(args.figure_id, config, args.out)


# ============================================================================
# PARSER
# ============================================================================

def _add_data(p):
    p.add_argument("--data", required=True, help="data directory written by gen-data")
    p.add_argument("--task", required=True, choices=TASK_KINDS)


def _add_grid(p):
    p.add_argument("--samples", type=int, help="samples per axis")
    p.add_argument("--alpha-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--beta-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--subsample", type=int, help="evaluate on the first N examples only")
    p.add_argument("--workers", type=int, help="worker processes (default: config / LOSSSCOPE_WORKERS)")


def build_parser():
    parser = _Parser(prog="lossscope", description="Loss landscapes of pretrained and scratch-trained transformers.")
    parser.add_argument("--config", help="YAML file overriding the defaults in lossscope.yaml")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate the synthetic corpus and tasks")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="masked-token pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory to write")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune (--init) or train from scratch")
    _add_data(p)
    p.add_argument("--out", required=True, help="run directory to write")
    p.add_argument("--init", help="pretrained checkpoint or run directory")
    p.add_argument("--extend", help="continue this run directory instead of starting a new one")
    p.add_argument("--extra-epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("curve", help="1D loss curve from theta0 through theta1")
    p.add_argument("--theta0", required=True)
    p.add_argument("--theta1", required=True)
    _add_data(p)
    _add_grid(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curve)

    for name, help_text in (("surface", "2D training-loss surface"), ("error-surface", "2D dev-error surface")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--theta0", required=True, help="starting point (pretrained or initial)")
        p.add_argument("--theta1", required=True, help="model fine-tuned on --task")
        p.add_argument("--theta2", required=True, help="model fine-tuned on the other task")
        _add_data(p)
        _add_grid(p)
        if name == "surface":
            p.add_argument("--anchor", choices=("theta0", "theta1"), default="theta0")
        p.add_argument("--out", required=True)
        p.set_defaults(func=cmd_surface)

    p = sub.add_parser("trajectory", help="project a run's epochs onto the (delta1, delta2) plane")
    p.add_argument("--run", required=True)
    p.add_argument("--theta0", required=True)
    p.add_argument("--theta1", help="default: the run's final checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trajectory)

    p = sub.add_parser("layer-surface", help="surface around theta1 restricted to one layer group")
    p.add_argument("--theta0", required=True)
    p.add_argument("--theta1", required=True)
    p.add_argument("--theta2", required=True)
    p.add_argument("--group", required=True, help="low, middle, high, all, or layers like 0,1 or 2-3")
    _add_data(p)
    _add_grid(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_layer_surface)

    p = sub.add_parser("rollback", help="dev accuracy with layer groups reset to theta0")
    p.add_argument("--theta0", required=True)
    p.add_argument("--theta1", required=True)
    p.add_argument("--groups", help="';'-separated groups (default: low;middle;high)")
    _add_data(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollback)

    p = sub.add_parser("render", help="SVG for a grid, curve or learning-curve file")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=RENDER_KINDS)
    p.add_argument("--overlay", help="trajectory CSV drawn over a surface")
    p.add_argument("--cap", type=float, help="colour scale cap (default 3 for loss, 1 for error)")
    p.add_argument("--levels", help="comma-separated contour levels")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("repro", help="rebuild one figure or table")
    p.add_argument("figure_id", metavar="FIGURE", help=", ".join(RECIPES))
    p.add_argument("--out", help="output directory (default: run.output_dir)")
    p.set_defaults(func=cmd_repro)
    return parser


def cli(argv=None):
    """Run one subcommand; returns the exit status."""
    with contextlib.redirect_stdout(sys.stderr):
        parser = build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            return EXIT_OK if e.code in (0, None) else EXIT_USAGE
        try:
            if args.config is not None:
                _existing(args.config, "config file")
            config = load_config(args.config)
            args.func(args, config)
        except UsageError as e:
            print(f"Error: {e}")
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        except (LossscopeError, ValueError, OSError) as e:
            print(f"Error: {e}")
            return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(cli())
