# param_space.py
"""
Flat parameter-vector algebra.

Every model parameter lives in one float64 array. A ParamLayout names the
contiguous segments of that array; encoder segments carry the index of the
transformer layer they belong to, everything else (embeddings, the final
norm, task heads) carries none. Vectors and directions are immutable once
built, so they can be shared freely between grid workers.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from errors import (
    InvalidGroupError,
    LayoutMismatchError,
    ZeroDirectionError,
)

ROLES = ("embedding", "encoder", "final_norm", "head")


@dataclass(frozen=True)
class Segment:
    name: str
    layer_index: Optional[int]
    offset: int
    length: int
    shape: tuple
    role: str = "encoder"

    @property
    def stop(self):
        return self.offset + self.length


@dataclass(frozen=True)
class ParamLayout:
    segments: tuple
    total_len: int
    # the ModelConfig that produced this layout, if any (None for toy layouts)
    model_config: object = None

    def __post_init__(self):
        cursor = 0
        for seg in self.segments:
            if seg.offset != cursor:
                raise ValueError(f"segment '{seg.name}' starts at {seg.offset}, expected {cursor}")
            if seg.length != int(np.prod(seg.shape, dtype=np.int64)):
                raise ValueError(f"segment '{seg.name}' length {seg.length} does not match shape {seg.shape}")
            if seg.role not in ROLES:
                raise ValueError(f"segment '{seg.name}' has unknown role '{seg.role}'")
            if (seg.role == "encoder") != (seg.layer_index is not None):
                raise ValueError(f"segment '{seg.name}': only encoder segments carry a layer index")
            cursor = seg.stop
        if cursor != self.total_len:
            raise ValueError(f"segments cover {cursor} scalars, layout says {self.total_len}")

    @property
    def num_layers(self):
        indices = [s.layer_index for s in self.segments if s.layer_index is not None]
        return max(indices) + 1 if indices else 0

    def segment(self, name):
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def index_mask(self, predicate):
        """Boolean mask over the flat array selecting segments where predicate(seg) holds."""
        mask = np.zeros(self.total_len, dtype=bool)
        for seg in self.segments:
            if predicate(seg):
                mask[seg.offset:seg.stop] = True
        return mask

    def unflatten(self, values):
        """Map segment name -> shaped view into values (no copies)."""
        return {s.name: values[s.offset:s.stop].reshape(s.shape) for s in self.segments}

    def to_json(self):
        return [[s.name, s.layer_index, s.offset, s.length, list(s.shape), s.role] for s in self.segments]

    @classmethod
    def from_json(cls, rows, model_config=None):
        segments = tuple(
            Segment(name, layer, offset, length, tuple(shape), role)
            for name, layer, offset, length, shape, role in rows
        )
        total = segments[-1].stop if segments else 0
        return cls(segments, total, model_config)


def toy_layout(lengths, layer_indices=None):
    """Layout of 1-D segments, handy for small hand-checked vectors."""
    if layer_indices is None:
        layer_indices = list(range(len(lengths)))
    segments = []
    offset = 0
    for k, (length, layer) in enumerate(zip(lengths, layer_indices)):
        role = "encoder" if layer is not None else "embedding"
        segments.append(Segment(f"seg{k}", layer, offset, length, (length,), role))
        offset += length
    return ParamLayout(tuple(segments), offset)


def _frozen(values):
    arr = np.array(values, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ParamVector:
    layout: ParamLayout
    values: np.ndarray
    label: str = "params"

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        if self.values.ndim != 1 or self.values.shape[0] != self.layout.total_len:
            raise LayoutMismatchError(
                f"{self.label}: {self.values.shape} values for a layout of {self.layout.total_len}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.label}: parameter vector contains non-finite values")

    def unflatten(self):
        return self.layout.unflatten(self.values)

    def relabel(self, label):
        return ParamVector(self.layout, self.values, label)


@dataclass(frozen=True)
class Provenance:
    kind: str  # diff | masked | rescaled | gradient
    detail: tuple = ()

    def describe(self):
        if self.kind == "diff":
            return f"{self.detail[0]}-{self.detail[1]}"
        if self.kind == "masked":
            return f"{self.detail[0]}@{self.detail[1]}"
        if self.kind == "rescaled":
            return f"{self.detail[0]}*->{self.detail[1]!r}"
        return f"grad({self.detail[0]})" if self.detail else "grad"


@dataclass(frozen=True, eq=False)
class Direction:
    layout: ParamLayout
    values: np.ndarray
    provenance: Provenance = field(default_factory=lambda: Provenance("diff", ("?", "?")))
    # (tip, base) when values == tip - base; kept through masking
    endpoints: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        if self.values.ndim != 1 or self.values.shape[0] != self.layout.total_len:
            raise LayoutMismatchError(
                f"direction has {self.values.shape} values for a layout of {self.layout.total_len}"
            )

    @property
    def id(self):
        return self.provenance.describe()


@dataclass(frozen=True)
class LayerGroup:
    layer_indices: frozenset
    label: str

    def __init__(self, layer_indices, label=None):
        indices = frozenset(int(i) for i in layer_indices)
        object.__setattr__(self, "layer_indices", indices)
        object.__setattr__(self, "label", label if label is not None else _range_label(indices))

    def validate(self, num_layers):
        bad = sorted(i for i in self.layer_indices if i < 0 or i >= num_layers)
        if bad:
            raise InvalidGroupError(f"group '{self.label}' has layer indices {bad} outside [0, {num_layers})")

    def selects(self, seg):
        return seg.layer_index is not None and seg.layer_index in self.layer_indices


def _range_label(indices):
    if not indices:
        return "none"
    lo, hi = min(indices), max(indices)
    if len(indices) == hi - lo + 1:
        return f"{lo}-{hi}" if hi > lo else str(lo)
    return ",".join(str(i) for i in sorted(indices))


def layer_thirds(num_layers):
    """Low, middle and high layer groups; boundaries at L//3 and 2L//3."""
    b1, b2 = num_layers // 3, (2 * num_layers) // 3
    return (
        LayerGroup(range(0, b1), "low"),
        LayerGroup(range(b1, b2), "middle"),
        LayerGroup(range(b2, num_layers), "high"),
    )


def all_layers(num_layers):
    return LayerGroup(range(num_layers), "all")


def parse_group(text, num_layers):
    """'low' / 'middle' / 'high' / 'all' / 'none' or a comma list like '0,1,4-5'."""
    text = text.strip().lower()
    named = {g.label: g for g in layer_thirds(num_layers)}
    named["all"] = all_layers(num_layers)
    named["none"] = LayerGroup((), "none")
    if text in named:
        return named[text]
    indices = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = part.split("-", 1)
                indices.extend(range(int(lo), int(hi) + 1))
            elif part:
                indices.append(int(part))
    except ValueError:
        raise InvalidGroupError(f"cannot parse layer group '{text}'")
    group = LayerGroup(indices)
    group.validate(num_layers)
    return group


# ============================================================================
# OPERATIONS
# ============================================================================

def _check_layouts(*items):
    first = items[0].layout
    for item in items[1:]:
        if item.layout is not first and item.layout != first:
            raise LayoutMismatchError("parameter layouts are not compatible")


def dot(a, b):
    """Inner product with a correctly rounded sum, so it never depends on summation order."""
    _check_layouts(a, b)
    return math.fsum(a.values * b.values)


def norm(d):
    """Euclidean norm, summed with fsum so it does not depend on segment order."""
    return math.sqrt(math.fsum(d.values * d.values))


def diff(a, b):
    """
    Direction from b to a.

    Args:
        a: ParamVector at the tip.
        b: ParamVector at the base, on the same layout as a.

    Returns:
        Direction with values a - b. It remembers (a, b), so combine can land
        exactly on either end.

    Raises:
        LayoutMismatchError: a and b were built for different models.
    """
    _check_layouts(a, b)
    return Direction(a.layout, a.values - b.values, Provenance("diff", (a.label, b.label)), (a, b))


def rescale_to(d, target):
    if not target > 0:
        raise ValueError(f"target norm must be positive, got {target}")
    current = norm(d)
    if current == 0:
        raise ZeroDirectionError(f"cannot rescale the zero direction '{d.id}'")
    return Direction(d.layout, d.values * (target / current), Provenance("rescaled", (d.id, float(target))))


def _lerp_offset(origin, d):
    """0 when origin is the base of d's endpoints, 1 when it is the tip, else None."""
    if d.endpoints is None:
        return None
    tip, base = d.endpoints
    if np.array_equal(base.values, origin.values):
        return 0.0
    if np.array_equal(tip.values, origin.values):
        return 1.0
    return None


def combine(origin, terms):
    """
    origin + sum(coef * dir) for (coef, dir) in terms.

    Args:
        origin: ParamVector the terms are added to
        terms: list of (coef, Direction) pairs

    Returns:
        ParamVector on origin's layout

    When the first term's direction came from diff(tip, base) and origin is
    one of those endpoints, the components it moves are formed as
    (1-t)*base + t*tip with t = coef (origin = base) or 1 + coef
    (origin = tip). Both endpoints then come out bit-exact; later terms are
    added as usual.
    """
    terms = list(terms)
    _check_layouts(origin, *[d for _, d in terms])
    values = origin.values.copy()
    rest = terms
    if terms:
        coef, d = terms[0]
        offset = _lerp_offset(origin, d)
        if offset is not None:
            tip, base = d.endpoints
            moving = d.values != 0
            t = offset + coef
            values[moving] = (1.0 - t) * base.values[moving] + t * tip.values[moving]
            rest = terms[1:]
    for coef, d in rest:
        values += coef * d.values
    return ParamVector(origin.layout, values, origin.label + "+combo")


def cosine(a, b):
    """
    Cosine of the angle between two directions.

    Args:
        a, b: Directions on the same layout.

    Returns:
        float in [-1, 1]. Rescaling either argument by a positive factor
        leaves it unchanged.

    Raises:
        ZeroDirectionError: either direction is all zeros.
    """
    na, nb = norm(a), norm(b)
    if na == 0 or nb == 0:
        raise ZeroDirectionError("cosine is undefined for a zero direction")
    return max(-1.0, min(1.0, dot(a, b) / (na * nb)))


def mask_to_group(d, g, layout=None):
    layout = layout if layout is not None else d.layout
    if layout is not d.layout and layout != d.layout:
        raise LayoutMismatchError("direction does not use the given layout")
    g.validate(layout.num_layers)
    keep = layout.index_mask(g.selects)
    return Direction(
        layout,
        np.where(keep, d.values, 0.0),
        Provenance("masked", (d.id, g.label)),
        d.endpoints,
    )


def non_layer_residue(d):
    keep = d.layout.index_mask(lambda seg: seg.layer_index is None)
    return Direction(d.layout, np.where(keep, d.values, 0.0), Provenance("masked", (d.id, "non-layer")))


def _splice(dst, src, predicate, label):
    _check_layouts(dst, src)
    values = dst.values.copy()
    for seg in dst.layout.segments:
        if predicate(seg):
            values[seg.offset:seg.stop] = src.values[seg.offset:seg.stop]
    return ParamVector(dst.layout, values, label)


def splice_group(dst, src, g):
    """dst with the segments of layer group g copied from src (layer rollback)."""
    g.validate(dst.layout.num_layers)
    return _splice(dst, src, g.selects, f"{dst.label}<{g.label}<{src.label}")


def with_head_from(dst, src):
    """dst with its task-head segments taken from src."""
    return _splice(dst, src, lambda seg: seg.role == "head", dst.label)


def add_directions(*dirs):
    _check_layouts(*dirs)
    total = np.zeros(dirs[0].layout.total_len)
    for d in dirs:
        total = total + d.values
    return Direction(dirs[0].layout, total, Provenance("diff", ("sum", str(len(dirs)))))
