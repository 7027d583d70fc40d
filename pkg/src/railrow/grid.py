"""Row-anchor gridding: polyline annotations <-> per-anchor column classes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exceptions import (
    DuplicateOrderError,
    NonMonotonePolylineError,
    UnknownSceneTagError,
    ValidationError,
)

SCENE_TAGS = ("sun", "rain", "night", "curve", "slope", "cross", "line", "near", "far")


@dataclass(frozen=True)
class RowAnchorGrid:
    """Discretization of an ``H x W`` image into ``h`` anchor rows and ``w`` columns.

    Class ``k`` in ``0..w-1`` is column ``k``; class ``w`` is background.
    """

    image_height: int
    image_width: int
    anchor_rows: tuple
    num_columns: int
    num_rails: int = 4

    def __post_init__(self):
        rows = tuple(float(y) for y in self.anchor_rows)
        object.__setattr__(self, "anchor_rows", rows)
        if self.image_height <= 0 or self.image_width <= 0:
            raise ValidationError("image dimensions must be positive")
        if self.num_columns < 2:
            raise ValidationError(f"num_columns must be >= 2, got {self.num_columns}")
        if self.num_rails < 1:
            raise ValidationError(f"num_rails must be >= 1, got {self.num_rails}")
        if not rows:
            raise ValidationError("at least one anchor row is required")
        arr = np.asarray(rows)
        if np.any(np.diff(arr) <= 0):
            raise ValidationError("anchor rows must be strictly increasing")
        if arr[0] < 0 or arr[-1] >= self.image_height:
            raise ValidationError("anchor rows must lie in [0, image_height)")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_rows)

    @property
    def background_class(self) -> int:
        return self.num_columns

    @property
    def num_classes(self) -> int:
        return self.num_columns + 1

    @property
    def cell_width(self) -> float:
        return self.image_width / self.num_columns

    @property
    def anchors(self) -> np.ndarray:
        return np.asarray(self.anchor_rows, dtype=np.float64)

    def with_columns(self, num_columns: int) -> "RowAnchorGrid":
        return RowAnchorGrid(self.image_height, self.image_width, self.anchor_rows,
                             num_columns, self.num_rails)

    def to_dict(self) -> dict:
        return {
            "image_height": self.image_height,
            "image_width": self.image_width,
            "anchor_rows": list(self.anchor_rows),
            "num_columns": self.num_columns,
            "num_rails": self.num_rails,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RowAnchorGrid":
        return cls(int(d["image_height"]), int(d["image_width"]), tuple(d["anchor_rows"]),
                   int(d["num_columns"]), int(d.get("num_rails", 4)))

    @classmethod
    def paper(cls) -> "RowAnchorGrid":
        """1280x720 evaluation grid: anchors 200..710 step 10, 200 columns, 4 rails."""
        return cls(720, 1280, tuple(range(200, 720, 10)), 200, 4)

    @classmethod
    def desk(cls, num_columns: int = 100, height: int = 96, width: int = 256,
             num_rails: int = 4) -> "RowAnchorGrid":
        """Reference anchor rows 200..700 (every 20 px of a 720-px frame) rescaled to ``height``."""
        rows = tuple(y * height / 720.0 for y in range(200, 720, 20))
        return cls(height, width, rows, num_columns, num_rails)


@dataclass(frozen=True)
class RailPolyline:
    order_number: int
    vertices: tuple  # ((x, y), ...)

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if int(self.order_number) < 1:
            raise ValidationError(f"order_number must be positive, got {self.order_number}")
        if len(verts) < 2:
            raise ValidationError(f"rail {self.order_number}: need >= 2 vertices")
        dy = np.diff([v[1] for v in verts])
        if not (np.all(dy > 0) or np.all(dy < 0)):
            raise NonMonotonePolylineError(
                f"rail {self.order_number}: y-coordinates are not strictly monotone")

    @property
    def xs(self) -> np.ndarray:
        return np.array([v[0] for v in self.vertices])

    @property
    def ys(self) -> np.ndarray:
        return np.array([v[1] for v in self.vertices])

    def x_at(self, y) -> np.ndarray:
        """Linearly interpolated x at each ``y``; NaN outside the polyline's y-span."""
        xs, ys = self.xs, self.ys
        if ys[0] > ys[-1]:
            xs, ys = xs[::-1], ys[::-1]
        y = np.asarray(y, dtype=np.float64)
        out = np.interp(y, ys, xs)
        return np.where((y >= ys[0]) & (y <= ys[-1]), out, np.nan)


@dataclass(frozen=True)
class RailAnnotation:
    rails: tuple
    scene_tags: frozenset = field(default_factory=frozenset)
    image_size: tuple = (720, 1280)  # (H, W)

    def __post_init__(self):
        object.__setattr__(self, "rails", tuple(self.rails))
        object.__setattr__(self, "scene_tags", frozenset(self.scene_tags))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        orders = [r.order_number for r in self.rails]
        if len(set(orders)) != len(orders):
            raise DuplicateOrderError(f"duplicate order numbers in {sorted(orders)}")
        unknown = set(self.scene_tags) - set(SCENE_TAGS)
        if unknown:
            raise UnknownSceneTagError(f"unknown scene tags: {sorted(unknown)}")

    def sorted_rails(self) -> list:
        return sorted(self.rails, key=lambda r: r.order_number)


def pixel_to_column(x, grid: RowAnchorGrid):
    """Column class of pixel ``x``: ``floor(x * w / W)`` clamped to ``[0, w-1]``."""
    xa = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(xa)) or np.any(xa < 0) or np.any(xa >= grid.image_width):
        raise ValidationError(f"x outside [0, {grid.image_width}); clip polylines first")
    k = np.clip(np.floor(xa * grid.num_columns / grid.image_width), 0, grid.num_columns - 1)
    k = k.astype(np.int64)
    return int(k) if k.ndim == 0 else k


def column_to_pixel(k, grid: RowAnchorGrid):
    """Cell-center pixel of (fractional) column ``k``."""
    out = (np.asarray(k, dtype=np.float64) + 0.5) * grid.image_width / grid.num_columns
    return float(out) if out.ndim == 0 else out


def anchor_points(annotation: RailAnnotation, grid: RowAnchorGrid) -> np.ndarray:
    """Exact polyline x at every (slot, anchor); NaN where the rail is absent.

    Slots are filled with the ``C`` lowest order numbers, in order.
    """
    _check_size(annotation, grid)
    pts = np.full((grid.num_rails, grid.num_anchors), np.nan)
    for slot, rail in enumerate(annotation.sorted_rails()[: grid.num_rails]):
        x = rail.x_at(grid.anchors)
        x[(x < 0) | (x >= grid.image_width)] = np.nan
        pts[slot] = x
    return pts


def encode(annotation: RailAnnotation, grid: RowAnchorGrid) -> np.ndarray:
    """``C x h`` integer class targets for one annotation."""
    pts = anchor_points(annotation, grid)
    targets = np.full(pts.shape, grid.background_class, dtype=np.int64)
    present = ~np.isnan(pts)
    if present.any():
        targets[present] = pixel_to_column(pts[present], grid)
    return targets


def targets_to_points(targets: np.ndarray, grid: RowAnchorGrid) -> np.ndarray:
    """Cell-center x for each non-background target, NaN elsewhere."""
    targets = np.asarray(targets)
    pts = np.full(targets.shape, np.nan)
    m = targets != grid.background_class
    pts[m] = column_to_pixel(targets[m], grid)
    return pts


@dataclass
class RailPrediction:
    """Per-slot presence, fractional column location and pixel x at every anchor.

    ``locations`` and ``x`` are NaN where the rail is predicted absent.
    """

    present: np.ndarray  # (C, h) bool
    locations: np.ndarray  # (C, h) float
    x: np.ndarray  # (C, h) float, pixels
    anchor_rows: tuple = ()

    def to_dict(self) -> dict:
        rails = []
        for i in range(self.present.shape[0]):
            m = self.present[i]
            rails.append({
                "slot": i,
                "order": i + 1,
                "anchors": [float(y) for y in np.asarray(self.anchor_rows)[m]],
                "x": [round(float(v), 4) for v in self.x[i][m]],
            })
        return {"rails": rails}


def softmax_expectation(logits: np.ndarray) -> np.ndarray:
    """Expected column index under the softmax of the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ np.arange(logits.shape[-1], dtype=p.dtype)


def decode(logits: np.ndarray, grid: RowAnchorGrid) -> RailPrediction:
    """Decode a ``C x h x (w+1)`` logit tensor.

    A cell is present when its argmax is not the background class; the
    location is the softmax expectation over the ``w`` column classes only.
    """
    logits = np.asarray(logits, dtype=np.float64)
    expected = (grid.num_rails, grid.num_anchors, grid.num_classes)
    if logits.shape != expected:
        raise ValidationError(f"logits shape {logits.shape} != {expected}")
    present = logits.argmax(axis=-1) != grid.background_class
    loc = softmax_expectation(logits[..., : grid.num_columns])
    loc = np.where(present, loc, np.nan)
    x = np.where(present, column_to_pixel(np.nan_to_num(loc), grid), np.nan)
    return RailPrediction(present, loc, x, grid.anchor_rows)


def one_hot_logits(targets: np.ndarray, grid: RowAnchorGrid, scale: float = 50.0) -> np.ndarray:
    """Logits whose decode reproduces ``targets`` (delta distributions)."""
    out = np.zeros(tuple(np.shape(targets)) + (grid.num_classes,))
    np.put_along_axis(out, np.asarray(targets)[..., None], scale, axis=-1)
    return out


def reduction_ratio(H, W, h, w) -> float:
    """Segmentation-output elements over row-classification-output elements."""
    if min(H, W, h, w) <= 0:
        raise ValidationError("all dimensions must be positive")
    return (H * W) / (h * (w + 1))


def _check_size(annotation: RailAnnotation, grid: RowAnchorGrid):
    if tuple(annotation.image_size) != (grid.image_height, grid.image_width):
        raise ValidationError(
            f"annotation size {annotation.image_size} does not match grid "
            f"({grid.image_height}, {grid.image_width})")


def clip_polyline(vertices: Sequence, width: float, height: float) -> list:
    """Longest contiguous in-frame piece of a polyline, split at frame crossings.

    Returns an empty list when fewer than two vertices survive.
    """
    eps = 1e-6
    xmax, ymax = width - eps, height - eps
    pieces, cur = [], []

    def inside(p):
        return 0 <= p[0] <= xmax and 0 <= p[1] <= ymax

    def boundary_t(p, q):
        # parametric range [t0, t1] of segment p->q inside the frame
        t0, t1 = 0.0, 1.0
        for a, b, lo, hi in ((p[0], q[0], 0.0, xmax), (p[1], q[1], 0.0, ymax)):
            d = b - a
            if abs(d) < 1e-12:
                if a < lo or a > hi:
                    return None
                continue
            ta, tb = (lo - a) / d, (hi - a) / d
            if ta > tb:
                ta, tb = tb, ta
            t0, t1 = max(t0, ta), min(t1, tb)
        return (t0, t1) if t0 <= t1 else None

    verts = [tuple(map(float, v)) for v in vertices]
    for p, q in zip(verts[:-1], verts[1:]):
        span = boundary_t(p, q)
        if span is None:
            if cur:
                pieces.append(cur)
                cur = []
            continue
        t0, t1 = span
        a = (p[0] + t0 * (q[0] - p[0]), p[1] + t0 * (q[1] - p[1]))
        b = (p[0] + t1 * (q[0] - p[0]), p[1] + t1 * (q[1] - p[1]))
        if not cur:
            cur = [a]
        elif t0 > 0:
            pieces.append(cur)
            cur = [a]
        if b != cur[-1]:
            cur.append(b)
        if t1 < 1:
            pieces.append(cur)
            cur = []
    if cur:
        pieces.append(cur)
    pieces = [pc for pc in pieces if len(pc) >= 2]
    if not pieces:
        return []
    return max(pieces, key=lambda pc: abs(pc[-1][1] - pc[0][1]))


def monotone_run(vertices: Iterable) -> list:
    """Longest run of vertices with strictly monotone y."""
    verts = list(vertices)
    if len(verts) < 2:
        return verts
    best, start = (0, 1), 0
    sign = 0
    for i in range(1, len(verts)):
        d = float(verts[i][1]) - float(verts[i - 1][1])
        s = (d > 0) - (d < 0)
        if s == 0 or (sign and s != sign):
            start = i if s == 0 else i - 1
            sign = s
        else:
            sign = s
        if i + 1 - start > best[1] - best[0]:
            best = (start, i + 1)
    return verts[best[0]: best[1]]
