# landscape.py
"""
Loss landscapes around trained transformers.

  curve_1d         f(a)    = J(theta0 + a*delta1)
  surface_2d       f(a, b) = J(theta0 + a*delta1 + b*delta2), delta2 rescaled to |delta1|
  error_surface    the same grid, valued by dev-set error rate
  layer_surface    f(a, b) = J(theta1 + a*delta1^G + b*delta2^G) for a layer group G
  project_trajectory  per-epoch (d_alpha, d_beta) on the (delta1, delta2) plane
  rollback_table   dev accuracy with a layer group reset to its starting values
  flatness_width   width of the region around a curve minimum under a loss threshold

Task heads are held at the fine-tuned values at every grid point, so directions
only move the shared encoder. Grid cells are evaluated by eval_grid, which
fans out over a process pool and places results by index.
"""

import math
import os
import time
from dataclasses import dataclass, field
from multiprocessing import Pool

import numpy as np
import pandas as pd
from tqdm import tqdm

from errors import ConfigError, GridEvaluationError, TrajectoryError, ZeroDirectionError
from mini_model import evaluate
from param_space import (
    combine,
    cosine,
    diff,
    dot,
    mask_to_group,
    norm,
    rescale_to,
    splice_group,
    with_head_from,
)

KINDS = ("train_loss", "dev_error")
# below this minimum a ratio threshold is meaningless; use the absolute epsilon
FLATNESS_MIN_LOSS = 1e-8


def resolve_workers(workers=None):
    """Explicit count, else LOSSSCOPE_WORKERS, else every available CPU."""
    if workers is None:
        raw = os.environ.get("LOSSSCOPE_WORKERS")
        if raw is None or raw.strip() == "":
            return os.cpu_count() or 1
        try:
            workers = int(raw)
        except ValueError:
            raise ConfigError(f"LOSSSCOPE_WORKERS must be a positive integer, got '{raw}'")
    if workers < 1:
        raise ConfigError(f"worker count must be a positive integer, got {workers}")
    return workers


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True)
class GridSpec:
    alpha_range: tuple = (-4.0, 4.0)
    beta_range: tuple = (-4.0, 4.0)
    samples_per_axis: int = 40

    def __post_init__(self):
        if self.samples_per_axis < 2:
            raise ValueError(f"samples_per_axis must be >= 2, got {self.samples_per_axis}")
        for name in ("alpha_range", "beta_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must have positive width, got {(lo, hi)}")

    def alphas(self):
        return np.linspace(self.alpha_range[0], self.alpha_range[1], self.samples_per_axis)

    def betas(self):
        return np.linspace(self.beta_range[0], self.beta_range[1], self.samples_per_axis)

    def to_dict(self):
        return {"alpha_range": list(self.alpha_range), "beta_range": list(self.beta_range),
                "samples_per_axis": self.samples_per_axis}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["alpha_range"]), tuple(data["beta_range"]), int(data["samples_per_axis"]))


@dataclass
class CurveSamples:
    alphas: np.ndarray
    losses: np.ndarray
    axis_scale: float

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if self.alphas.shape != self.losses.shape:
            raise ValueError("curve alphas and losses differ in length")
        if np.any(np.diff(self.alphas) <= 0):
            raise ValueError("curve alphas must be strictly increasing")

    @property
    def distances(self):
        """Alphas expressed as parameter-space distance from theta0."""
        return self.alphas * self.axis_scale


@dataclass
class SurfaceGrid:
    spec: GridSpec
    values: np.ndarray
    kind: str
    axes_meta: dict = field(default_factory=dict)
    origin_meta: dict = field(default_factory=dict)
    cell_seconds: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = self.spec.samples_per_axis
        if self.values.shape != (n, n):
            raise ValueError(f"surface values have shape {self.values.shape}, expected {(n, n)}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown surface kind '{self.kind}'")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("surface contains non-finite values")
        if self.kind == "dev_error" and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("dev_error surface values must lie in [0, 1]")
        if self.kind == "train_loss" and self.values.min() < 0:
            raise ValueError("train_loss surface values must be >= 0")

    def value_at(self, alpha, beta):
        """Value of the cell nearest to (alpha, beta)."""
        i = int(np.argmin(np.abs(self.spec.alphas() - alpha)))
        j = int(np.argmin(np.abs(self.spec.betas() - beta)))
        return self.values[i, j]


@dataclass(frozen=True)
class TrajectoryPoint:
    epoch: int
    d_alpha: float
    d_beta: float
    v_cos: float
    cos_defined: bool = True


@dataclass
class TrajectoryProjection:
    points: list

    def as_frame(self):
        return pd.DataFrame(
            [(p.epoch, p.d_alpha, p.d_beta, p.v_cos, p.cos_defined) for p in self.points],
            columns=["epoch", "d_alpha", "d_beta", "v_cos", "cos_defined"],
        )


@dataclass(frozen=True)
class FlatnessWidth:
    width: float
    truncated: bool
    lo: float
    hi: float
    threshold: float
    minimum: float


@dataclass(frozen=True)
class GridValues:
    values: np.ndarray
    seconds: np.ndarray
    wall_seconds: float = 0.0
    workers: int = 1

    def timing_summary(self):
        cells = len(self.seconds)
        total = float(np.sum(self.seconds))
        return {
            "cells": cells,
            "workers": self.workers,
            "wall_seconds": self.wall_seconds,
            "cell_seconds_total": total,
            "cell_seconds_mean": total / cells if cells else 0.0,
            "cell_seconds_max": float(np.max(self.seconds)) if cells else 0.0,
        }


# ============================================================================
# EVALUATORS
# ============================================================================

class DatasetLoss:
    """Mean loss of a parameter vector on a fixed labeled set."""

    def __init__(self, dataset, head="classification", subsample=None):
        self.dataset = dataset if subsample is None else dataset.subset(slice(0, subsample))
        self.head = head
        self.subsample = subsample

    def __call__(self, params):
        return evaluate(params, self.dataset, self.head).loss

    def describe(self):
        return {"evaluator": f"{self.head}_loss", "examples": len(self.dataset), "subsample": self.subsample}


class DatasetError(DatasetLoss):
    """Classification error rate on a fixed labeled set."""

    def __call__(self, params):
        return evaluate(params, self.dataset, self.head).error_rate

    def describe(self):
        return {"evaluator": "error_rate", "examples": len(self.dataset), "subsample": self.subsample}


def _describe(loss):
    return loss.describe() if hasattr(loss, "describe") else {"evaluator": type(loss).__name__}


class PlaneProbe:
    """
    Callable (alpha, beta) -> J(anchor + alpha*d1 + beta*d2).

    Points are built with combine, so when d1 came from diff(tip, base) and
    the anchor is either end, alpha = 0 and the other end are bit-exact.
    """

    def __init__(self, anchor, d1, d2, loss):
        self.anchor = anchor
        self.d1 = d1
        self.d2 = d2
        self.loss = loss

    def point(self, alpha, beta):
        terms = [(alpha, self.d1)] + ([(beta, self.d2)] if self.d2 is not None else [])
        return combine(self.anchor, terms).relabel(f"{self.anchor.label}({alpha:g},{beta:g})")

    def __call__(self, alpha, beta=0.0):
        return float(self.loss(self.point(alpha, beta)))


# ============================================================================
# PARALLEL GRID EVALUATION
# ============================================================================

_worker_evaluator = None


def _install_evaluator(evaluator):
    global _worker_evaluator
    _worker_evaluator = evaluator


def _eval_cell(task):
    """Worker: (index, alpha, beta) -> (index, value, seconds, error or None)."""
    index, alpha, beta = task
    start = time.perf_counter()
    try:
        value = _worker_evaluator(alpha, beta)
    except Exception as e:
        return index, None, 0.0, repr(e)
    return index, value, time.perf_counter() - start, None


def eval_grid(points, evaluator, workers=None, desc="Evaluating grid"):
    """
    Evaluate evaluator(alpha, beta) at every point.

    Results land at the index of their point, so the output does not depend
    on worker count or completion order. Any failing cell aborts the grid.
    Per-cell seconds come back with the values and a timing summary is
    printed once the grid is done.
    """
    tasks = [(k, float(a), float(b)) for k, (a, b) in enumerate(points)]
    n = len(tasks)
    values = np.zeros(n)
    seconds = np.zeros(n)
    if n == 0:
        return GridValues(values, seconds)
    workers = min(resolve_workers(workers), n)
    start = time.perf_counter()

    def place(results):
        for index, value, elapsed, error in tqdm(results, total=n, desc=desc, unit="cell"):
            if error is not None:
                _, alpha, beta = tasks[index]
                raise GridEvaluationError(alpha, beta, error)
            values[index] = value
            seconds[index] = elapsed

    if workers == 1:
        previous = _worker_evaluator
        _install_evaluator(evaluator)
        try:
            place(map(_eval_cell, tasks))
        finally:
            _install_evaluator(previous)
    else:
        chunksize = max(1, n // (workers * 8))
        with Pool(workers, initializer=_install_evaluator, initargs=(evaluator,)) as pool:
            place(pool.imap_unordered(_eval_cell, tasks, chunksize=chunksize))
    result = GridValues(values, seconds, time.perf_counter() - start, workers)
    t = result.timing_summary()
    print(f"Evaluated {n} cells on {workers} worker(s) in {t['wall_seconds']:.2f}s "
          f"(per cell: mean {t['cell_seconds_mean']:.4f}s, max {t['cell_seconds_max']:.4f}s, "
          f"total {t['cell_seconds_total']:.2f}s)")
    return result


# ============================================================================
# CURVES AND SURFACES
# ============================================================================

def curve_1d(theta0, theta1, loss, spec=None, workers=None, fix_head=True):
    """
    Loss along the straight line from theta0 (alpha=0) through theta1 (alpha=1).

    Args:
        theta0: starting point, usually the pretrained parameters.
        theta1: end of training from theta0.
        loss: callable params -> float, e.g. DatasetLoss on the training set.
        spec: GridSpec; only alpha_range and samples_per_axis are used.
        workers: process count for eval_grid, None for every CPU.
        fix_head: copy theta1's task head onto theta0 first.

    Returns:
        CurveSamples with axis_scale = |theta1 - theta0|. When alpha=1 is
        sampled, its value equals loss(theta1) bit for bit.
    """
    spec = spec or GridSpec()
    if fix_head:
        theta0 = with_head_from(theta0, theta1)
    delta1 = diff(theta1, theta0)
    plane = PlaneProbe(theta0, delta1, None, loss)
    alphas = spec.alphas()
    result = eval_grid([(a, 0.0) for a in alphas], plane, workers, desc="Evaluating curve")
    return CurveSamples(alphas, result.values, norm(delta1))


def plane_surface(anchor, delta1, delta2, loss, spec=None, kind="train_loss", workers=None,
                  origin_meta=None):
    """Grid of loss(anchor + a*delta1 + b*delta2') with delta2' = delta2 rescaled to |delta1|."""
    spec = spec or GridSpec()
    n1, n2 = norm(delta1), norm(delta2)
    if n1 == 0:
        raise ZeroDirectionError(f"first axis '{delta1.id}' is the zero direction")
    if n2 == 0:
        raise ZeroDirectionError(f"second axis '{delta2.id}' is the zero direction")
    delta2r = rescale_to(delta2, n1)
    plane = PlaneProbe(anchor, delta1, delta2r, loss)
    alphas, betas = spec.alphas(), spec.betas()
    points = [(a, b) for a in alphas for b in betas]
    print(f"Evaluating {spec.samples_per_axis}x{spec.samples_per_axis} {kind} surface around '{anchor.label}'")
    result = eval_grid(points, plane, workers, desc=f"Evaluating {kind} surface")
    n = spec.samples_per_axis
    axes_meta = {
        "delta1": delta1.id,
        "delta2": delta2.id,
        "delta1_norm": n1,
        "delta2_norm": n2,
        "cosine": cosine(delta1, delta2r),
    }
    axes_meta.update(_describe(loss))
    return SurfaceGrid(spec, result.values.reshape(n, n), kind, axes_meta,
                       origin_meta or {"anchor": anchor.label},
                       result.seconds.reshape(n, n))


def _axes(theta0, theta1, theta2, fix_head):
    if fix_head:
        theta0 = with_head_from(theta0, theta1)
        theta2 = with_head_from(theta2, theta1)
    return theta0, diff(theta1, theta0), diff(theta2, theta0)


def surface_2d(theta0, theta1, theta2, loss, spec=None, workers=None, kind="train_loss",
               anchor="theta0", fix_head=True):
    """
    Loss surface spanned by delta1 = theta1 - theta0 and delta2 = theta2 - theta0,
    where theta2 was fine-tuned on another task from the same start.

    anchor="theta1" centres the same plane on the fine-tuned point instead.

    Args:
        theta0, theta1, theta2: start, end of training on this task, and end
            of training on another task.
        loss: callable params -> float.
        spec: GridSpec for both axes.
        workers: process count for eval_grid, None for every CPU.
        kind: label stored with the grid ("train_loss", "dev_error", ...).
        anchor: "theta0" or "theta1".
        fix_head: hold every point at theta1's task head.

    Returns:
        SurfaceGrid of shape (samples, samples), indexed [alpha, beta].
        delta2 is rescaled to the norm of delta1 before sampling.
    """
    theta0, delta1, delta2 = _axes(theta0, theta1, theta2, fix_head)
    if anchor == "theta0":
        return plane_surface(theta0, delta1, delta2, loss, spec, kind, workers,
                             origin_meta={"anchor": "theta0", "label": theta0.label})
    if anchor == "theta1":
        return plane_surface(theta1, delta1, delta2, loss, spec, kind, workers,
                             origin_meta={"anchor": "theta1", "label": theta1.label})
    raise ValueError(f"anchor must be 'theta0' or 'theta1', got '{anchor}'")


def error_surface(theta0, theta1, theta2, dev, spec=None, workers=None, subsample=None, fix_head=True):
    """Dev-set error rate over the surface_2d grid."""
    return surface_2d(theta0, theta1, theta2, DatasetError(dev, subsample=subsample), spec, workers,
                      kind="dev_error", fix_head=fix_head)


def layer_surface(theta1, delta1, delta2, group, loss, spec=None, workers=None, kind="train_loss"):
    """
    Surface around the fine-tuned point restricted to one layer group.
    With delta1 = theta1 - theta0, cell (-1, 0) is the model with that group rolled back.
    """
    group.validate(theta1.layout.num_layers)
    d1g = mask_to_group(delta1, group)
    d2g = mask_to_group(delta2, group)
    for name, d in (("delta1", d1g), ("delta2", d2g)):
        if norm(d) == 0:
            raise ZeroDirectionError(
                f"{name} is zero on layer group '{group.label}': those layers did not move, "
                "so there is no axis to plot")
    grid = plane_surface(theta1, d1g, d2g, loss, spec, kind, workers,
                         origin_meta={"anchor": "theta1", "label": theta1.label})
    grid.axes_meta["group"] = group.label
    grid.axes_meta["layers"] = sorted(group.layer_indices)
    return grid


# ============================================================================
# TRAJECTORIES
# ============================================================================

def project_point(delta_i, delta1):
    """(v_cos, d_alpha, d_beta) of delta_i on the plane whose first axis is delta1."""
    n1 = norm(delta1)
    if n1 == 0:
        raise ZeroDirectionError(f"reference direction '{delta1.id}' is zero")
    ni = norm(delta_i)
    if ni == 0:
        return math.nan, 0.0, 0.0
    inner = dot(delta_i, delta1)
    v_cos = max(-1.0, min(1.0, inner / (ni * n1)))
    d_alpha = inner / (n1 * n1)
    # sqrt((|di|/|d1|)^2 - d_alpha^2), taken as the length of the part of
    # delta_i orthogonal to delta1 so it never goes negative
    residual = delta_i.values - d_alpha * delta1.values
    d_beta = math.sqrt(math.fsum(residual * residual)) / n1
    return v_cos, d_alpha, d_beta


def project_trajectory(run, theta0, theta1, fix_head=True):
    """Project every epoch checkpoint of run onto the plane of delta1 = theta1 - theta0."""
    if fix_head:
        theta0 = with_head_from(theta0, theta1)
    encoder = theta0.layout.index_mask(lambda seg: seg.role == "encoder")
    start = run.checkpoints[0].params
    if start.layout != theta0.layout or not np.array_equal(start.values[encoder], theta0.values[encoder]):
        raise TrajectoryError(f"run '{run.label}' does not start at '{theta0.label}'")
    delta1 = diff(theta1, theta0)
    if norm(delta1) == 0:
        raise ZeroDirectionError("theta1 equals theta0; the trajectory has no reference direction")
    points = []
    for ckpt in run.checkpoints[1:]:
        theta_i = with_head_from(ckpt.params, theta1) if fix_head else ckpt.params
        v_cos, d_alpha, d_beta = project_point(diff(theta_i, theta0), delta1)
        points.append(TrajectoryPoint(ckpt.epoch_index, d_alpha, d_beta, v_cos, not math.isnan(v_cos)))
    return TrajectoryProjection(points)


# ============================================================================
# ROLLBACK, FLATNESS, CONSISTENCY
# ============================================================================

def rollback_table(theta1, theta0, groups, dev, head="classification"):
    """Dev accuracy after resetting each layer group of theta1 to its theta0 values."""
    if not groups:
        raise ValueError("rollback_table needs at least one layer group")
    full = 1.0 - evaluate(theta1, dev, head).error_rate
    rows = []
    for group in groups:
        rolled = splice_group(theta1, theta0, group)
        accuracy = 1.0 - evaluate(rolled, dev, head).error_rate
        rows.append({
            "group": group.label,
            "layers": " ".join(str(i) for i in sorted(group.layer_indices)),
            "full_accuracy": full,
            "dev_accuracy": accuracy,
            "delta_vs_full": accuracy - full,
        })
    return pd.DataFrame(rows, columns=["group", "layers", "full_accuracy", "dev_accuracy", "delta_vs_full"])


def _crossing(a_out, a_in, l_out, l_in, threshold):
    return a_out + (threshold - l_out) * (a_in - a_out) / (l_in - l_out)


def flatness_width(curve, threshold_ratio=2.0, abs_epsilon=0.01):
    """
    Width, in parameter-space distance, of the contiguous stretch around the
    curve minimum where loss <= threshold_ratio * min (or <= abs_epsilon when
    the minimum is ~0). A stretch that runs off the sampled range is
    reported as a lower bound with truncated=True.
    """
    if not threshold_ratio > 1:
        raise ValueError(f"threshold_ratio must be > 1, got {threshold_ratio}")
    a, l = curve.alphas, curve.losses
    if len(l) == 0 or not np.all(np.isfinite(l)):
        raise ValueError("flatness needs a curve with finite losses")
    k = int(np.argmin(l))
    minimum = float(l[k])
    threshold = threshold_ratio * minimum if minimum >= FLATNESS_MIN_LOSS else abs_epsilon

    truncated = False
    left = k
    while left > 0 and l[left - 1] <= threshold:
        left -= 1
    if left == 0:
        lo = a[0]
        truncated = True
    else:
        lo = _crossing(a[left - 1], a[left], l[left - 1], l[left], threshold)
    right = k
    while right < len(l) - 1 and l[right + 1] <= threshold:
        right += 1
    if right == len(l) - 1:
        hi = a[-1]
        truncated = True
    else:
        hi = _crossing(a[right + 1], a[right], l[right + 1], l[right], threshold)
    return FlatnessWidth(float((hi - lo) * curve.axis_scale), truncated, float(lo), float(hi),
                         float(threshold), minimum)


def surface_consistency(train_grid, error_grid):
    """Spearman rank correlation between a training-loss surface and a dev-error surface."""
    if train_grid.spec != error_grid.spec:
        raise ValueError("surfaces were sampled on different grids")
    # Spearman is Pearson on average ranks
    train = pd.Series(train_grid.values.ravel()).rank()
    error = pd.Series(error_grid.values.ravel()).rank()
    return float(train.corr(error))
