# grid_io.py
"""
File formats for landscape results.

  *.grid             JSON header line, then a CSV body with one row per alpha
                     sample and one column per beta sample
  *_curve.csv        alpha, loss, axis_scale
  *_trajectory.csv   epoch, d_alpha, d_beta, v_cos, cos_defined

Floats are written with 17 significant digits and read back with pandas'
round-trip parser, so every value survives a save/load cycle bit-exactly.
"""

import io
import json
import os

import numpy as np
import pandas as pd

from errors import FormatError
from landscape import CurveSamples, GridSpec, SurfaceGrid, TrajectoryPoint, TrajectoryProjection

FORMAT_VERSION = 1
FLOAT_FORMAT = "%.17g"
CURVE_COLUMNS = ["alpha", "loss", "axis_scale"]
TRAJECTORY_COLUMNS = ["epoch", "d_alpha", "d_beta", "v_cos", "cos_defined"]


def _read_csv(path_or_buffer, what):
    try:
        return pd.read_csv(path_or_buffer, float_precision="round_trip")
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise FormatError(f"{what}: not a readable CSV table ({e})")


def _require(path):
    if not os.path.exists(path):
        raise FormatError(f"file '{path}' not found")


# ============================================================================
# SURFACES
# ============================================================================

def save_surface(grid, path):
    header = {
        "format_version": FORMAT_VERSION,
        "spec": grid.spec.to_dict(),
        "kind": grid.kind,
        "axes_meta": grid.axes_meta,
        "origin_meta": grid.origin_meta,
    }
    n = grid.spec.samples_per_axis
    body = pd.DataFrame(grid.values, columns=[f"b{j}" for j in range(n)])
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        body.to_csv(f, index=False, float_format=FLOAT_FORMAT)


def load_surface(path):
    _require(path)
    with open(path, "r", encoding="utf-8") as f:
        head_line = f.readline()
        body = f.read()
    if not head_line.strip():
        raise FormatError(f"{path}: empty grid file")
    try:
        header = json.loads(head_line)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: grid header is not JSON ({e})")
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported grid format {header.get('format_version')!r}")
    try:
        spec = GridSpec.from_dict(header["spec"])
        kind = header["kind"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad grid header ({e})")
    df = _read_csv(io.StringIO(body), path)
    n = spec.samples_per_axis
    if df.shape != (n, n):
        raise FormatError(f"{path}: grid body is {df.shape[0]}x{df.shape[1]}, header says {n}x{n}")
    try:
        return SurfaceGrid(spec, df.to_numpy(dtype=np.float64), kind,
                           header.get("axes_meta", {}), header.get("origin_meta", {}))
    except ValueError as e:
        raise FormatError(f"{path}: {e}")


# ============================================================================
# CURVES AND TRAJECTORIES
# ============================================================================

def save_curve(curve, path):
    df = pd.DataFrame({
        "alpha": curve.alphas,
        "loss": curve.losses,
        "axis_scale": np.full(len(curve.alphas), curve.axis_scale),
    }, columns=CURVE_COLUMNS)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def load_curve(path):
    _require(path)
    df = _read_csv(path, path)
    if list(df.columns) != CURVE_COLUMNS:
        raise FormatError(f"{path}: expected columns {CURVE_COLUMNS}, got {list(df.columns)}")
    if df.empty:
        raise FormatError(f"{path}: curve has no samples")
    try:
        return CurveSamples(df["alpha"].to_numpy(), df["loss"].to_numpy(), float(df["axis_scale"].iloc[0]))
    except ValueError as e:
        raise FormatError(f"{path}: {e}")


def save_trajectory(projection, path):
    projection.as_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT)


def load_trajectory(path):
    _require(path)
    df = _read_csv(path, path)
    if list(df.columns) != TRAJECTORY_COLUMNS:
        raise FormatError(f"{path}: expected columns {TRAJECTORY_COLUMNS}, got {list(df.columns)}")
    points = [
        TrajectoryPoint(int(row.epoch), float(row.d_alpha), float(row.d_beta), float(row.v_cos),
                        bool(row.cos_defined))
        for row in df.itertuples(index=False)
    ]
    return TrajectoryProjection(points)


def save_table(df, path):
    """Any other result table (rollback, flatness, findings)."""
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def load_table(path):
    _require(path)
    return _read_csv(path, path)


def detect_format(path):
    """'surface', 'curve', 'trajectory' or 'learning_curves', judged from the file itself."""
    _require(path)
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
    if not first:
        raise FormatError(f"{path}: empty file")
    if first.startswith("{"):
        return "surface"
    columns = first.split(",")
    if columns == CURVE_COLUMNS:
        return "curve"
    if columns == TRAJECTORY_COLUMNS:
        return "trajectory"
    if columns[:3] == ["run", "provenance", "epoch"]:
        return "learning_curves"
    raise FormatError(f"{path}: unrecognized result file (header '{first}')")
