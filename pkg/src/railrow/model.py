"""The row-classification network: conv backbone, 1x1 reduction, two-layer classifier."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ValidationError
from .grid import RowAnchorGrid, reduction_ratio
from .nn import Conv2d, Flatten, Linear, ParamStore, ReLU, Reshape, Sequential
from .nn.ops import conv_output_size

DESK_BACKBONE = ((16, 3, 2), (32, 3, 2), (64, 3, 2), (128, 3, 2), (256, 3, 2))
PAPER_BACKBONE = ((64, 3, 2), (128, 3, 2), (256, 3, 2), (512, 3, 2), (512, 3, 2))


@dataclass(frozen=True)
class ModelSpec:
    input_height: int = 96
    input_width: int = 256
    in_channels: int = 1
    backbone: tuple = DESK_BACKBONE  # (out_channels, kernel, stride) per block
    mid_channels: int = 8
    hidden_width: int = 256
    grid: RowAnchorGrid = field(default_factory=RowAnchorGrid.desk)
    head: str = "row"  # "row" or "dense" (per-pixel output of the same size as the input)

    def __post_init__(self):
        object.__setattr__(self, "backbone", tuple(tuple(int(v) for v in b) for b in self.backbone))
        stride = 1
        for b in self.backbone:
            if len(b) != 3 or min(b) <= 0:
                raise ValidationError(f"bad backbone block {b}")
            stride *= b[2]
        if self.input_height % stride or self.input_width % stride:
            raise ValidationError(
                f"cumulative stride {stride} must divide input {self.input_height}x{self.input_width}")
        if self.head not in ("row", "dense"):
            raise ValidationError(f"unknown head {self.head!r}")
        if min(self.mid_channels, self.hidden_width, self.in_channels) <= 0:
            raise ValidationError("channel counts must be positive")

    @property
    def total_stride(self) -> int:
        return int(np.prod([b[2] for b in self.backbone])) if self.backbone else 1

    def feature_shape(self) -> tuple:
        c, h, w = self.in_channels, self.input_height, self.input_width
        for out_c, k, s in self.backbone:
            c, h, w = out_c, conv_output_size(h, k, s, k // 2), conv_output_size(w, k, s, k // 2)
        return c, h, w

    @property
    def flatten_length(self) -> int:
        _, h, w = self.feature_shape()
        return self.mid_channels * h * w

    @property
    def output_shape(self) -> tuple:
        g = self.grid
        if self.head == "row":
            return (g.num_rails, g.num_anchors, g.num_classes)
        return (g.num_rails, self.input_height, self.input_width)

    @property
    def output_length(self) -> int:
        return int(np.prod(self.output_shape))

    @classmethod
    def paper(cls) -> "ModelSpec":
        """288x800 RGB input, /32 backbone ending in 512 channels, mid 8, hidden 2048."""
        return cls(288, 800, 3, PAPER_BACKBONE, 8, 2048, RowAnchorGrid.paper())

    def with_grid(self, grid: RowAnchorGrid) -> "ModelSpec":
        return replace(self, grid=grid)

    def to_text(self) -> str:
        g = self.grid
        lines = [
            f"input_height={self.input_height}",
            f"input_width={self.input_width}",
            f"in_channels={self.in_channels}",
            "backbone=" + ",".join(":".join(str(v) for v in b) for b in self.backbone),
            f"mid_channels={self.mid_channels}",
            f"hidden_width={self.hidden_width}",
            f"head={self.head}",
            f"grid.image_height={g.image_height}",
            f"grid.image_width={g.image_width}",
            "grid.anchor_rows=" + ",".join(repr(float(y)) for y in g.anchor_rows),
            f"grid.num_columns={g.num_columns}",
            f"grid.num_rails={g.num_rails}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        kv = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"bad config line {raw!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        try:
            grid = RowAnchorGrid(
                int(kv["grid.image_height"]), int(kv["grid.image_width"]),
                tuple(float(y) for y in kv["grid.anchor_rows"].split(",")),
                int(kv["grid.num_columns"]), int(kv["grid.num_rails"]))
            backbone = tuple(tuple(int(v) for v in b.split(":"))
                             for b in kv["backbone"].split(",") if b)
            return cls(int(kv["input_height"]), int(kv["input_width"]), int(kv["in_channels"]),
                       backbone, int(kv["mid_channels"]), int(kv["hidden_width"]), grid,
                       kv.get("head", "row"))
        except KeyError as exc:
            raise ValidationError(f"model config missing key {exc}") from None


class RowNet:
    """Forward/backward network built from a :class:`ModelSpec`.

    Passing an existing ``store`` reuses its parameters (e.g. a float64 copy
    for gradient checking, or a loaded checkpoint).
    """

    def __init__(self, spec: ModelSpec, store: ParamStore | None = None, seed: int = 0):
        self.spec = spec
        fresh = store is None
        self.store = ParamStore() if fresh else store
        rng = np.random.default_rng(seed)
        layers = []
        c = spec.in_channels
        for i, (out_c, k, s) in enumerate(spec.backbone):
            layers += [Conv2d(self.store, f"backbone.{i}", c, out_c, k, s, k // 2, rng), ReLU()]
            c = out_c
        self.backbone = Sequential(layers)
        fc2 = Linear(self.store, "head.fc2", spec.hidden_width, spec.output_length, rng)
        self.head = Sequential([
            Conv2d(self.store, "head.reduce", c, spec.mid_channels, 1, 1, 0, rng),
            Flatten(),
            Linear(self.store, "head.fc1", spec.flatten_length, spec.hidden_width, rng),
            ReLU(),
            fc2,
            Reshape(spec.output_shape),
        ])
        if fresh:
            # near-uniform initial class distribution
            self.store.params["head.fc2.weight"] *= 0.01
        expected = set(self.param_names())
        if set(self.store.params) != expected:
            raise ValidationError("parameter store does not match the model spec: "
                                  f"missing {sorted(expected - set(self.store.params))}, "
                                  f"unexpected {sorted(set(self.store.params) - expected)}")
        for name in expected:
            want = self._shape_of(name)
            if self.store[name].shape != want:
                raise ValidationError(f"{name}: shape {self.store[name].shape} != {want}")

    def _shape_of(self, name):
        for layer in self.backbone.layers + self.head.layers:
            if name in layer.param_names():
                if name.endswith(".bias"):
                    return (layer.c_out if isinstance(layer, Conv2d) else layer.d_out,)
                if isinstance(layer, Conv2d):
                    return (layer.c_out, layer.c_in, layer.kernel, layer.kernel)
                return (layer.d_in, layer.d_out)
        raise KeyError(name)

    def param_names(self):
        return self.backbone.param_names() + self.head.param_names()

    def forward(self, x):
        x = np.asarray(x, dtype=self.store.dtype)
        if x.ndim == 3:
            x = x[:, None]
        want = (self.spec.in_channels, self.spec.input_height, self.spec.input_width)
        if x.shape[1:] != want:
            raise ValidationError(f"input shape {x.shape[1:]} != {want}")
        return self.head.forward(self.backbone.forward(x))

    __call__ = forward

    def features(self, x):
        """Flattened head feature (the vector fed to the classifier)."""
        x = np.asarray(x, dtype=self.store.dtype)
        out = self.backbone.forward(x)
        for layer in self.head.layers[:2]:
            out = layer.forward(out)
        return out

    def backward(self, dout):
        return self.backbone.backward(self.head.backward(dout))


def build(spec: ModelSpec, seed: int = 0) -> RowNet:
    return RowNet(spec, seed=seed)


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    output_shape: tuple
    params: int
    flops: int


def flops_estimate(spec: ModelSpec) -> list:
    """Per-layer FLOPs (2 x multiply-adds) for conv and linear layers; biases ignored."""
    rows = []
    c, h, w = spec.in_channels, spec.input_height, spec.input_width
    for i, (out_c, k, s) in enumerate(spec.backbone):
        ho, wo = conv_output_size(h, k, s, k // 2), conv_output_size(w, k, s, k // 2)
        rows.append(LayerCost(f"backbone.{i}", f"conv{k}x{k}/s{s}", (out_c, ho, wo),
                              k * k * c * out_c + out_c, 2 * k * k * c * out_c * ho * wo))
        c, h, w = out_c, ho, wo
    m = spec.mid_channels
    rows.append(LayerCost("head.reduce", "conv1x1", (m, h, w), c * m + m, 2 * c * m * h * w))
    d, hid, out = spec.flatten_length, spec.hidden_width, spec.output_length
    rows.append(LayerCost("head.fc1", "linear", (hid,), d * hid + hid, 2 * d * hid))
    rows.append(LayerCost("head.fc2", "linear", spec.output_shape, hid * out + out, 2 * hid * out))
    return rows


def total_flops(rows) -> int:
    return int(sum(r.flops for r in rows))


def head_flops(rows) -> int:
    return int(sum(r.flops for r in rows if r.name.startswith("head.")))


def head_vs_segmentation_cost(grid: RowAnchorGrid, H: int, W: int) -> float:
    """Output-element ratio of a C x H x W segmentation map over the C x h x (w+1) row output."""
    seg = grid.num_rails * H * W
    row = grid.num_rails * grid.num_anchors * grid.num_classes
    return seg / row
