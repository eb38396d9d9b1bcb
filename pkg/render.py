# render.py
"""
Deterministic SVG rendering of surfaces, curves and trajectories.

Contours come from marching squares over the sampled grid. Every crossing
point is computed from its grid edge in one fixed orientation, so the two
cells sharing an edge produce the identical point and curves close exactly.
All coordinates are printed with three decimals; identical inputs give
identical bytes.
"""

import os
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from errors import FormatError, UnknownKindError
from grid_io import detect_format, load_curve, load_surface, load_table, load_trajectory

RENDER_KINDS = ("contour", "heatmap", "curve", "trajectory_overlay")
DEFAULT_CAPS = {"train_loss": 3.0, "dev_error": 1.0}
DEFAULT_LEVEL_COUNT = 10

# colour ramp for 0..cap, dark blue through teal to yellow
RAMP = [
    (0.0, (68, 1, 84)),
    (0.25, (59, 82, 139)),
    (0.5, (33, 145, 140)),
    (0.75, (94, 201, 98)),
    (1.0, (253, 231, 37)),
]
SERIES_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
MARGIN = 48


@dataclass(frozen=True)
class RenderSpec:
    kind: str = "contour"
    color_cap: float = None
    levels: tuple = None
    width: int = 480
    height: int = 480
    markers: tuple = ()

    def __post_init__(self):
        if self.kind not in RENDER_KINDS:
            raise UnknownKindError(f"unknown render kind '{self.kind}', expected one of {RENDER_KINDS}")
        if self.color_cap is not None and not self.color_cap > 0:
            raise ValueError(f"color cap must be positive, got {self.color_cap}")
        if self.levels is not None:
            levels = list(self.levels)
            if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
                raise ValueError(f"contour levels must be strictly increasing, got {levels}")
        if self.width <= 2 * MARGIN or self.height <= 2 * MARGIN:
            raise ValueError(f"canvas {self.width}x{self.height} is too small")


def _f(x):
    return f"{x:.3f}"


def ramp_color(value, cap):
    """Hex colour for value on a linear 0..cap scale; values beyond cap saturate."""
    t = min(max(value / cap, 0.0), 1.0)
    for (t0, c0), (t1, c1) in zip(RAMP, RAMP[1:]):
        if t <= t1:
            w = (t - t0) / (t1 - t0)
            rgb = [round(a + w * (b - a)) for a, b in zip(c0, c1)]
            return "#{:02x}{:02x}{:02x}".format(*rgb)
    return "#{:02x}{:02x}{:02x}".format(*RAMP[-1][1])


# ============================================================================
# MARCHING SQUARES
# ============================================================================

# corner k of cell (i, j): 0=(i,j) 1=(i+1,j) 2=(i+1,j+1) 3=(i,j+1); edge k joins corner k and k+1
CORNER_OFFSETS = [(0, 0), (1, 0), (1, 1), (0, 1)]


def _edge_key(i, j, edge):
    a = CORNER_OFFSETS[edge]
    b = CORNER_OFFSETS[(edge + 1) % 4]
    p = (i + a[0], j + a[1])
    q = (i + b[0], j + b[1])
    return (p, q) if p < q else (q, p)


def _crossing(values, key, level):
    (pi, pj), (qi, qj) = key
    vp, vq = values[pi, pj], values[qi, qj]
    t = (level - vp) / (vq - vp)
    t = min(max(t, 0.0), 1.0)
    return (pi + t * (qi - pi), pj + t * (qj - pj))


def _cell_segments(above, center_above):
    """Edge pairs joined inside one cell, given which corners lie above the level."""
    crossing = [k for k in range(4) if above[k] != above[(k + 1) % 4]]
    if len(crossing) == 2:
        return [tuple(crossing)]
    if len(crossing) == 4:
        # saddle: cut off the two corners on the other side from the centre
        return [((k + 3) % 4, k) for k in range(4) if above[k] != center_above]
    return []


def contour_lines(values, level):
    """
    Polylines of values == level in grid-index coordinates.
    Returns a list of (points, closed) with points as [(i, j), ...].
    """
    values = np.asarray(values, dtype=np.float64)
    n_i, n_j = values.shape
    above = values > level
    segments = []
    for i in range(n_i - 1):
        for j in range(n_j - 1):
            corners = [bool(above[i + di, j + dj]) for di, dj in CORNER_OFFSETS]
            if all(corners) or not any(corners):
                continue
            center = values[i:i + 2, j:j + 2].mean() > level
            for e0, e1 in _cell_segments(corners, center):
                segments.append((_edge_key(i, j, e0), _edge_key(i, j, e1)))

    links = {}
    for index, (a, b) in enumerate(segments):
        links.setdefault(a, []).append(index)
        links.setdefault(b, []).append(index)

    used = [False] * len(segments)
    lines = []

    def walk(start_key, first):
        keys = [start_key]
        index = first
        key = start_key
        while index is not None and not used[index]:
            used[index] = True
            a, b = segments[index]
            key = b if a == key else a
            keys.append(key)
            index = next((k for k in links[key] if not used[k]), None)
        return keys

    # open lines start at grid-border keys, which have a single segment
    for key in sorted(k for k, segs in links.items() if len(segs) == 1):
        if not used[links[key][0]]:
            keys = walk(key, links[key][0])
            lines.append(([_crossing(values, k, level) for k in keys], False))
    for index in range(len(segments)):
        if not used[index]:
            start = segments[index][0]
            keys = walk(start, index)
            lines.append(([_crossing(values, k, level) for k in keys[:-1]], True))
    return lines


def default_levels(values, cap, count=DEFAULT_LEVEL_COUNT):
    lo = float(np.min(values))
    hi = min(float(np.max(values)), cap)
    if not hi > lo:
        return []
    return list(np.linspace(lo, hi, count + 2)[1:-1])


# ============================================================================
# SVG
# ============================================================================

class _Canvas:
    """Maps data coordinates to the plotting area of an SVG page."""

    def __init__(self, spec, x_range, y_range):
        self.spec = spec
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{spec.width}" height="{spec.height}" '
            f'viewBox="0 0 {spec.width} {spec.height}">',
            f'<rect x="0" y="0" width="{spec.width}" height="{spec.height}" fill="#ffffff"/>',
        ]

    def x(self, value):
        span = self.spec.width - 2 * MARGIN
        return MARGIN + (value - self.x0) / (self.x1 - self.x0) * span

    def y(self, value):
        span = self.spec.height - 2 * MARGIN
        return self.spec.height - MARGIN - (value - self.y0) / (self.y1 - self.y0) * span

    def add(self, element):
        self.parts.append(element)

    def polyline(self, points, color, closed=False, width=1.5, css_class="line"):
        coords = " ".join(f"{_f(self.x(px))},{_f(self.y(py))}" for px, py in points)
        tag = "polygon" if closed else "polyline"
        self.add(f'<{tag} class="{css_class}" points="{coords}" fill="none" stroke="{color}" '
                 f'stroke-width="{width}"/>')

    def marker(self, px, py, label, color="#000000", shape="circle"):
        cx, cy = _f(self.x(px)), _f(self.y(py))
        if shape == "circle":
            self.add(f'<circle class="marker" cx="{cx}" cy="{cy}" r="4" fill="{color}"/>')
        else:
            self.add(f'<rect class="marker" x="{_f(self.x(px) - 4)}" y="{_f(self.y(py) - 4)}" '
                     f'width="8" height="8" fill="{color}"/>')
        self.add(f'<text x="{_f(self.x(px) + 6)}" y="{_f(self.y(py) - 6)}" font-size="11">{escape(label)}</text>')

    def frame(self, x_label, y_label, title=None):
        s = self.spec
        self.add(f'<rect x="{MARGIN}" y="{MARGIN}" width="{s.width - 2 * MARGIN}" '
                 f'height="{s.height - 2 * MARGIN}" fill="none" stroke="#000000"/>')
        for value, anchor in ((self.x0, "start"), (self.x1, "end")):
            self.add(f'<text x="{_f(self.x(value))}" y="{s.height - MARGIN + 14}" font-size="10" '
                     f'text-anchor="{anchor}">{value:g}</text>')
        for value in (self.y0, self.y1):
            self.add(f'<text x="{MARGIN - 4}" y="{_f(self.y(value))}" font-size="10" '
                     f'text-anchor="end">{value:g}</text>')
        self.add(f'<text x="{s.width / 2:.3f}" y="{s.height - 10}" font-size="12" '
                 f'text-anchor="middle">{escape(x_label)}</text>')
        self.add(f'<text x="12" y="{s.height / 2:.3f}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 12 {s.height / 2:.3f})">{escape(y_label)}</text>')
        if title:
            self.add(f'<text x="{s.width / 2:.3f}" y="20" font-size="13" '
                     f'text-anchor="middle">{escape(title)}</text>')

    def text(self):
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def render_surface(grid, spec, trajectory=None):
    """Contour or heatmap of a SurfaceGrid; trajectory_overlay adds the projected path."""
    if spec.kind not in ("contour", "heatmap", "trajectory_overlay"):
        raise UnknownKindError(f"render kind '{spec.kind}' does not apply to a surface")
    if spec.kind == "trajectory_overlay" and trajectory is None:
        raise ValueError("trajectory_overlay needs a trajectory file")
    values = grid.values
    cap = spec.color_cap or DEFAULT_CAPS[grid.kind]
    levels = list(spec.levels) if spec.levels is not None else default_levels(values, cap)
    alphas, betas = grid.spec.alphas(), grid.spec.betas()
    canvas = _Canvas(spec, grid.spec.alpha_range, grid.spec.beta_range)

    def to_data(point):
        i, j = point
        return (np.interp(i, np.arange(len(alphas)), alphas), np.interp(j, np.arange(len(betas)), betas))

    if spec.kind == "heatmap":
        da, db = alphas[1] - alphas[0], betas[1] - betas[0]
        for i, a in enumerate(alphas):
            for j, b in enumerate(betas):
                x = canvas.x(a - da / 2)
                y = canvas.y(b + db / 2)
                w = canvas.x(a + da / 2) - x
                h = canvas.y(b - db / 2) - y
                canvas.add(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" '
                           f'fill="{ramp_color(values[i, j], cap)}"/>')

    for level in levels:
        color = "#000000" if spec.kind == "heatmap" else ramp_color(level, cap)
        lines = contour_lines(values, level)
        if not lines:
            continue
        canvas.add(f'<g class="level" data-level="{level:.6g}">')
        for points, closed in lines:
            canvas.polyline([to_data(p) for p in points], color, closed, width=1.0, css_class="contour")
        canvas.add("</g>")

    if trajectory is not None:
        path = [(0.0, 0.0)] + [(p.d_alpha, p.d_beta) for p in trajectory.points]
        canvas.polyline(path, "#d62728", width=2.0, css_class="trajectory")
        for px, py in path[1:]:
            canvas.add(f'<circle class="epoch" cx="{_f(canvas.x(px))}" cy="{_f(canvas.y(py))}" r="2.5" '
                       f'fill="#d62728"/>')
        canvas.marker(0.0, 0.0, "start", "#000000")
        canvas.marker(path[-1][0], path[-1][1], "end", "#d62728", shape="square")
    for label, px, py in spec.markers:
        canvas.marker(px, py, label)

    title = f"{grid.kind} around {grid.origin_meta.get('anchor', 'origin')}"
    if "group" in grid.axes_meta:
        title += f" (layers {grid.axes_meta['group']})"
    canvas.frame("alpha", "beta", title)
    return canvas.text()


def render_series(series, spec, x_label, y_label, title=None):
    """Line plot of [(label, xs, ys), ...]."""
    if spec.kind != "curve":
        raise UnknownKindError(f"render kind '{spec.kind}' does not apply to curves")
    if not series or any(len(xs) == 0 for _, xs, _ in series):
        raise ValueError("nothing to plot")
    xs_all = np.concatenate([np.asarray(xs, dtype=float) for _, xs, _ in series])
    ys_all = np.concatenate([np.asarray(ys, dtype=float) for _, _, ys in series])
    cap = spec.color_cap
    if cap is not None:
        ys_all = np.minimum(ys_all, cap)
    x_range = (float(xs_all.min()), float(xs_all.max()))
    y_range = (min(0.0, float(ys_all.min())), float(ys_all.max()))
    if x_range[1] == x_range[0]:
        x_range = (x_range[0] - 0.5, x_range[1] + 0.5)
    if y_range[1] == y_range[0]:
        y_range = (y_range[0], y_range[0] + 1.0)
    canvas = _Canvas(spec, x_range, y_range)
    for k, (label, xs, ys) in enumerate(series):
        color = SERIES_COLORS[k % len(SERIES_COLORS)]
        ys = np.asarray(ys, dtype=float)
        if cap is not None:
            ys = np.minimum(ys, cap)
        canvas.polyline(list(zip(xs, ys)), color, css_class="series")
        canvas.add(f'<text x="{spec.width - MARGIN - 4}" y="{MARGIN + 14 * (k + 1)}" font-size="11" '
                   f'text-anchor="end" fill="{color}">{escape(str(label))}</text>')
    canvas.frame(x_label, y_label, title)
    return canvas.text()


def render_curve(curve, spec, label="loss", normalized=True):
    xs = curve.distances if normalized else curve.alphas
    x_label = "distance from theta0 (alpha * |delta1|)" if normalized else "alpha"
    return render_series([(label, xs, curve.losses)], spec, x_label, "loss")


def render_learning_curves(df, spec, column="train_loss"):
    series = [(run, group["epoch"].to_numpy(), group[column].to_numpy())
              for run, group in df.groupby("run", sort=False)]
    return render_series(series, spec, "epoch", column, f"learning curves ({column})")


def render_file(input_path, spec, overlay_path=None):
    """SVG bytes for any result file the CLI writes."""
    fmt = detect_format(input_path)
    if fmt == "surface":
        trajectory = load_trajectory(overlay_path) if overlay_path else None
        return render_surface(load_surface(input_path), spec, trajectory).encode("utf-8")
    if fmt == "curve":
        return render_curve(load_curve(input_path), spec).encode("utf-8")
    if fmt == "learning_curves":
        return render_learning_curves(load_table(input_path), spec).encode("utf-8")
    raise FormatError(f"{input_path}: a {fmt} file cannot be rendered on its own; "
                      "pass it as the overlay of a surface")


def write_svg(svg, path):
    data = svg.encode("utf-8") if isinstance(svg, str) else svg
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)
