# repro.py
"""
Experiment recipes that rebuild each figure and table as files.

Runs and data are cached under <out>/runs and <out>/data and rebuilt on
demand, so recipes can be run in any order. Each recipe writes into
<out>/<figure-id>/ and finishes with a manifest.json listing every file it
produced with its md5 hash.

  fig1     training-loss surfaces, pretrained vs scratch, start/end marked
  fig2     learning curves of fine-tuning and training from scratch
  fig3     optimization trajectories over the training-loss surfaces
  fig4     short then extended fine-tuning over the dev-error surface
  fig5     dev-error surfaces, pretrained vs scratch
  fig6     1D curves on normalized axes with flatness widths
  fig7     layer-group surfaces (low / middle / high thirds)
  table1   dev accuracy after rolling back each layer third
  findings qualitative checks over every configured seed
"""

import hashlib
import json
import os

import pandas as pd

from checkpoint_io import is_run_dir, load_run, save_run
from errors import FormatError, UsageError
from grid_io import load_surface, save_curve, save_surface, save_table, save_trajectory
from landscape import (
    DatasetLoss,
    curve_1d,
    error_surface,
    flatness_width,
    layer_surface,
    project_trajectory,
    rollback_table,
    surface_2d,
    surface_consistency,
)
from param_space import diff, layer_thirds, with_head_from
from render import RenderSpec, default_levels, render_learning_curves, render_series, render_surface, write_svg
from synth_data import (
    TASK_KINDS,
    gen_corpus,
    gen_task,
    load_corpus,
    load_task,
    save_corpus,
    save_task,
)
from training import continue_run, export_learning_curves, finetune, pretrain, train_from_scratch, write_learning_curves

MANIFEST = "manifest.json"


def get_file_hash(filepath):
    """Calculate MD5 hash of a file's content."""
    hash_md5 = hashlib.md5()
    with open(filepath, "rb") as f:
        for chunk in iter(lambda: f.read(4096), b""):
            hash_md5.update(chunk)
    return hash_md5.hexdigest()


def write_manifest(out_dir, figure_id, files):
    entries = []
    for path in sorted(set(files)):
        entries.append({
            "path": os.path.relpath(path, out_dir).replace(os.sep, "/"),
            "md5": get_file_hash(path),
            "bytes": os.path.getsize(path),
        })
    manifest = {"figure": figure_id, "files": entries}
    path = os.path.join(out_dir, figure_id, MANIFEST)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(path):
    if not os.path.exists(path):
        raise FormatError(f"manifest '{path}' not found")
    with open(path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: manifest is not JSON ({e})")
    if "files" not in manifest:
        raise FormatError(f"{path}: manifest has no file list")
    return manifest


def _other(task_name):
    return TASK_KINDS[1 - TASK_KINDS.index(task_name)]


class Workspace:
    """Data, runs and shared grids of one output directory, built on first use."""

    def __init__(self, config, out_dir=None):
        self.config = config
        self.out_dir = out_dir or config.output_dir
        self.workers = config.workers
        self._runs = {}
        self._data = None

    def path(self, *parts):
        path = os.path.join(self.out_dir, *parts)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    # -- data ----------------------------------------------------------------

    def data(self):
        if self._data is not None:
            return self._data
        data_dir = os.path.join(self.out_dir, "data")
        d = self.config.values["data"]
        if os.path.exists(os.path.join(data_dir, "corpus.meta.json")):
            print(f"Loading data from '{data_dir}'")
            corpus = load_corpus(data_dir)
            dev_corpus = load_corpus(data_dir, "dev_corpus")
            tasks = {kind: load_task(data_dir, kind) for kind in TASK_KINDS}
            small = load_task(os.path.join(data_dir, "small"), d["small_task"])
        else:
            print(f"Generating data into '{data_dir}'")
            seed = self.config.seed
            process = self.config.process()
            corpus = gen_corpus(seed, d["corpus_size"], process)
            dev_corpus = gen_corpus(seed + 1, d["dev_corpus_size"], process)
            tasks = {kind: gen_task(kind, seed, (d["train_size"], d["dev_size"]), process) for kind in TASK_KINDS}
            small = gen_task(d["small_task"], seed + 1, (d["small_train_size"], d["dev_size"]), process)
            save_corpus(corpus, data_dir)
            save_corpus(dev_corpus, data_dir, "dev_corpus")
            for task in tasks.values():
                save_task(task, data_dir)
            save_task(small, os.path.join(data_dir, "small"))
        self._data = {"corpus": corpus, "dev_corpus": dev_corpus, "tasks": tasks, "small": small}
        return self._data

    def task(self, name):
        return self.data()["small"] if name == "small" else self.data()["tasks"][name]

    # -- runs ----------------------------------------------------------------

    def _cached(self, name, build):
        if name in self._runs:
            return self._runs[name]
        run_dir = os.path.join(self.out_dir, "runs", name)
        if is_run_dir(run_dir):
            print(f"Loading run '{name}' from '{run_dir}'")
            run = load_run(run_dir)
        else:
            run = build()
            save_run(run, run_dir)
        self._runs[name] = run
        return run

    def pretrained(self, seed):
        name = f"pretrain-s{seed}"
        data = self.data()
        return self._cached(name, lambda: pretrain(
            data["corpus"], self.config.train_config("pretrain", seed), self.config.model_config(),
            data["dev_corpus"], label=name))

    def finetuned(self, task_name, seed):
        name = f"finetune-{task_name}-s{seed}"
        return self._cached(name, lambda: finetune(
            self.pretrained(seed).final, self.task(task_name), self.config.train_config("finetune", seed),
            self.config.model_config(), label=name))

    def scratch(self, task_name, seed):
        name = f"scratch-{task_name}-s{seed}"
        return self._cached(name, lambda: train_from_scratch(
            self.task(task_name), self.config.train_config("scratch", seed), self.config.model_config(), label=name))

    def extended(self, seed):
        """Fine-tuning on the small task continued for extend_factor times its epochs."""
        short = self.finetuned("small", seed)
        extra = self.config.values["finetune"]["extend_factor"] * short.epochs
        name = f"finetune-small-s{seed}-x{extra}"
        return self._cached(name, lambda: continue_run(short, self.task("small"), extra))

    def endpoints(self, task_name, seed, provenance):
        """(theta0, theta1, theta2, run) for one task; theta2 is trained the same way on the other task."""
        kind = self.config.values["data"]["small_task"] if task_name == "small" else task_name
        other = _other(kind)
        if provenance == "pretrain":
            run = self.finetuned(task_name, seed)
            theta0 = self.pretrained(seed).final
            theta2 = self.finetuned(other, seed).final
        else:
            run = self.scratch(task_name, seed)
            theta0 = run.initial
            theta2 = self.scratch(other, seed).final
        return theta0, run.final, theta2, run

    # -- landscape helpers -----------------------------------------------------

    def train_loss(self, task_name):
        return DatasetLoss(self.task(task_name).train, subsample=self.config.subsample)

    def surface(self, task_name, seed, provenance, kind="train_loss"):
        """Shared surface grid, cached as a file under <out>/surfaces."""
        path = self.path("surfaces", f"{kind}-{task_name}-{provenance}-s{seed}.grid")
        if os.path.exists(path):
            return load_surface(path), path
        theta0, theta1, theta2, _ = self.endpoints(task_name, seed, provenance)
        spec = self.config.grid_spec()
        if kind == "train_loss":
            grid = surface_2d(theta0, theta1, theta2, self.train_loss(task_name), spec, self.workers)
        else:
            grid = error_surface(theta0, theta1, theta2, self.task(task_name).dev, spec, self.workers,
                                 self.config.subsample)
        save_surface(grid, path)
        return grid, path

    def render_spec(self, kind, grid=None, markers=()):
        r = self.config.values["render"]
        if grid is None:
            return RenderSpec(kind, None, None, r["width"], r["height"], tuple(markers))
        cap = r["loss_cap"] if grid.kind == "train_loss" else r["error_cap"]
        levels = default_levels(grid.values, cap, r["levels"]) or None
        return RenderSpec(kind, cap, tuple(levels) if levels else None, r["width"], r["height"], tuple(markers))

    def svg(self, path, text):
        write_svg(text, path)
        return path


ENDPOINT_MARKERS = (("theta0", 0.0, 0.0), ("theta1", 1.0, 0.0))


# ============================================================================
# RECIPES
# ============================================================================

def fig1(ws):
    seed = ws.config.seed
    files = []
    for task_name in TASK_KINDS:
        for provenance in ("pretrain", "scratch"):
            grid, path = ws.surface(task_name, seed, provenance)
            files.append(path)
            svg = render_surface(grid, ws.render_spec("contour", grid, ENDPOINT_MARKERS))
            files.append(ws.svg(ws.path("fig1", f"{task_name}-{provenance}.svg"), svg))
    return files


def fig2(ws):
    seed = ws.config.seed
    files = []
    for task_name in TASK_KINDS:
        runs = [ws.finetuned(task_name, seed), ws.scratch(task_name, seed)]
        df = export_learning_curves(runs)
        csv_path = ws.path("fig2", f"{task_name}-learning-curves.csv")
        write_learning_curves(df, csv_path)
        files.append(csv_path)
        files.append(ws.svg(ws.path("fig2", f"{task_name}-learning-curves.svg"),
                            render_learning_curves(df, ws.render_spec("curve"))))
    return files


def fig3(ws):
    seed = ws.config.seed
    files = []
    for task_name in TASK_KINDS:
        for provenance in ("pretrain", "scratch"):
            grid, grid_path = ws.surface(task_name, seed, provenance)
            theta0, theta1, _, run = ws.endpoints(task_name, seed, provenance)
            projection = project_trajectory(run, theta0, theta1)
            traj_path = ws.path("fig3", f"{task_name}-{provenance}-trajectory.csv")
            save_trajectory(projection, traj_path)
            svg = render_surface(grid, ws.render_spec("trajectory_overlay", grid), projection)
            files += [grid_path, traj_path, ws.svg(ws.path("fig3", f"{task_name}-{provenance}.svg"), svg)]
    return files


def fig4(ws):
    seed = ws.config.seed
    short = ws.finetuned("small", seed)
    extended = ws.extended(seed)
    theta0, theta1, theta2, _ = ws.endpoints("small", seed, "pretrain")
    grid_path = ws.path("fig4", "small-dev-error.grid")
    if os.path.exists(grid_path):
        grid = load_surface(grid_path)
    else:
        grid = error_surface(theta0, theta1, theta2, ws.task("small").dev, ws.config.grid_spec(), ws.workers,
                             ws.config.subsample)
        save_surface(grid, grid_path)
    projection = project_trajectory(extended, theta0, theta1)
    traj_path = ws.path("fig4", "small-extended-trajectory.csv")
    save_trajectory(projection, traj_path)
    curves_path = ws.path("fig4", "small-extended-learning-curves.csv")
    write_learning_curves(export_learning_curves([extended]), curves_path)
    print(f"Dev error after {short.epochs} epochs: {short.checkpoints[-1].dev_error:.4f}, "
          f"after {extended.epochs}: {extended.checkpoints[-1].dev_error:.4f}")
    svg = render_surface(grid, ws.render_spec("trajectory_overlay", grid), projection)
    return [grid_path, traj_path, curves_path, ws.svg(ws.path("fig4", "small-extended.svg"), svg)]


def fig5(ws):
    seed = ws.config.seed
    files = []
    rows = []
    for task_name in TASK_KINDS:
        for provenance in ("pretrain", "scratch"):
            grid, path = ws.surface(task_name, seed, provenance, kind="dev_error")
            train_grid, _ = ws.surface(task_name, seed, provenance)
            rows.append({"task": task_name, "provenance": provenance,
                         "spearman_train_vs_error": surface_consistency(train_grid, grid)})
            svg = render_surface(grid, ws.render_spec("heatmap", grid, ENDPOINT_MARKERS))
            files += [path, ws.svg(ws.path("fig5", f"{task_name}-{provenance}-error.svg"), svg)]
    consistency_path = ws.path("fig5", "consistency.csv")
    save_table(pd.DataFrame(rows), consistency_path)
    return files + [consistency_path]


def fig6(ws):
    seed = ws.config.seed
    ratio = ws.config.values["grid"]["flatness_ratio"]
    files = []
    rows = []
    for task_name in TASK_KINDS:
        series = []
        for provenance in ("pretrain", "scratch"):
            theta0, theta1, _, _ = ws.endpoints(task_name, seed, provenance)
            curve = curve_1d(theta0, theta1, ws.train_loss(task_name), ws.config.curve_spec(), ws.workers)
            path = ws.path("fig6", f"{task_name}-{provenance}_curve.csv")
            save_curve(curve, path)
            files.append(path)
            width = flatness_width(curve, ratio)
            rows.append({"task": task_name, "provenance": provenance, "width": width.width,
                         "truncated": width.truncated, "threshold": width.threshold, "minimum": width.minimum})
            series.append((provenance, curve.distances, curve.losses))
        cap = ws.config.values["render"]["loss_cap"]
        spec = RenderSpec("curve", cap, None, ws.config.values["render"]["width"], ws.config.values["render"]["height"])
        svg = render_series(series, spec, "distance from theta0 (alpha * |delta1|)", "training loss",
                            f"{task_name}: 1D interpolation")
        files.append(ws.svg(ws.path("fig6", f"{task_name}-curves.svg"), svg))
    widths_path = ws.path("fig6", "flatness.csv")
    save_table(pd.DataFrame(rows), widths_path)
    return files + [widths_path]


def fig7(ws):
    seed = ws.config.seed
    files = []
    for task_name in TASK_KINDS:
        theta0, theta1, theta2, _ = ws.endpoints(task_name, seed, "pretrain")
        theta0h = with_head_from(theta0, theta1)
        delta1 = diff(theta1, theta0h)
        delta2 = diff(with_head_from(theta2, theta1), theta0h)
        for group in layer_thirds(theta1.layout.num_layers):
            grid = layer_surface(theta1, delta1, delta2, group, ws.train_loss(task_name), ws.config.grid_spec(),
                                 ws.workers)
            grid_path = ws.path("fig7", f"{task_name}-{group.label}.grid")
            save_surface(grid, grid_path)
            markers = (("theta1", 0.0, 0.0), ("rolled back", -1.0, 0.0))
            svg = render_surface(grid, ws.render_spec("contour", grid, markers))
            files += [grid_path, ws.svg(ws.path("fig7", f"{task_name}-{group.label}.svg"), svg)]
    return files


def _rollback(ws, task_name, seed):
    theta0, theta1, _, _ = ws.endpoints(task_name, seed, "pretrain")
    table = rollback_table(theta1, theta0, layer_thirds(theta1.layout.num_layers), ws.task(task_name).dev)
    table.insert(0, "task", task_name)
    return table


def table1(ws):
    seed = ws.config.seed
    table = pd.concat([_rollback(ws, task_name, seed) for task_name in TASK_KINDS], ignore_index=True)
    path = ws.path("table1", "rollback.csv")
    save_table(table, path)
    return [path]


def findings(ws):
    """One row per (seed, check); 'holds' says whether the expected ordering was observed."""
    rows = []
    ratio = ws.config.values["grid"]["flatness_ratio"]
    fine_epochs = ws.config.values["finetune"]["epochs"]

    def add(seed, check, task, a, b, holds):
        rows.append({"seed": seed, "check": check, "task": task, "value_a": a, "value_b": b, "holds": bool(holds)})

    for seed in ws.config.seeds:
        for task_name in TASK_KINDS:
            fine = ws.finetuned(task_name, seed)
            scratch = ws.scratch(task_name, seed)
            at = min(fine_epochs, scratch.epochs)
            a, b = fine.checkpoints[at].train_loss, scratch.checkpoints[at].train_loss
            add(seed, f"finetune_loss_below_scratch_at_epoch_{at}", task_name, a, b, a < b)
            a, b = fine.checkpoints[-1].train_loss, scratch.checkpoints[-1].train_loss
            add(seed, "scratch_final_loss_not_below_finetune", task_name, a, b, b >= a)

            widths = []
            for provenance in ("pretrain", "scratch"):
                theta0, theta1, _, _ = ws.endpoints(task_name, seed, provenance)
                curve = curve_1d(theta0, theta1, ws.train_loss(task_name), ws.config.curve_spec(), ws.workers)
                widths.append(flatness_width(curve, ratio).width)
            add(seed, "finetune_optimum_wider", task_name, widths[0], widths[1], widths[0] > widths[1])

            table = _rollback(ws, task_name, seed).set_index("group")
            low = -table.loc["low", "delta_vs_full"]
            high = -table.loc["high", "delta_vs_full"]
            add(seed, "low_rollback_hurts_less_than_high", task_name, low, high, low < high)

        short = ws.finetuned("small", seed)
        extended = ws.extended(seed)
        a, b = short.checkpoints[-1].dev_error, extended.checkpoints[-1].dev_error
        add(seed, "extended_finetune_dev_error_stable", "small", a, b, abs(b - a) < 0.05)

    df = pd.DataFrame(rows, columns=["seed", "check", "task", "value_a", "value_b", "holds"])
    path = ws.path("findings", "findings.csv")
    save_table(df, path)
    summary = df.groupby(["check", "task"], sort=True)["holds"].sum()
    for (check, task), held in summary.items():
        print(f"  {check} [{task}]: holds in {held}/{len(ws.config.seeds)} seeds")
    return [path]


RECIPES = {
    "fig1": fig1,
    "fig2": fig2,
    "fig3": fig3,
    "fig4": fig4,
    "fig5": fig5,
    "fig6": fig6,
    "fig7": fig7,
    "table1": table1,
    "findings": findings,
}


def repro(figure_id, config, out_dir=None):
    """Run one recipe and write its manifest; returns the manifest path."""
    if figure_id not in RECIPES:
        raise UsageError(f"unknown figure id '{figure_id}', expected one of {', '.join(RECIPES)}")
    ws = Workspace(config, out_dir)
    print("=" * 60)
    print(f"Reproducing {figure_id} into '{ws.out_dir}'")
    print("=" * 60)
    files = RECIPES[figure_id](ws)
    os.makedirs(os.path.join(ws.out_dir, figure_id), exist_ok=True)
    manifest = write_manifest(ws.out_dir, figure_id, files)
    print(f"Done. {len(files)} files listed in '{manifest}'")
    return manifest
