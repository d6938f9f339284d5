"""Block builders and assembly of the 30-block encoder-decoder network.

The architecture is a fixed family with two variants: ``full`` runs the
middle third (blocks 7-24) at 128 channels, ``pruned`` at 64. A
declarative NetworkSpec drives both the concrete builders and the pure
shape/cost arithmetic, so the executed network can always be checked
against the predicted trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .ops import (
    BatchNormParams,
    ConvWeights,
    add_elementwise,
    batchnorm,
    concat_channels,
    conv2d,
    depthwise_conv2d,
    init_batchnorm,
    init_conv_weights,
    maxpool2d,
    pad_channels,
    pointwise_conv2d,
    relu,
    select_channels,
    transposed_conv2d,
    upsample_nearest2x,
)
from .tensor import Tensor

BLOCK_KINDS = ("Initial", "Downsample", "Standard", "Upsample", "LastConv")
VARIANTS = ("full", "pruned")

NUM_CLASSES = 2
MIN_INTERNAL = 8


def internal_width(out_channels: int) -> int:
    """Projection width inside factorized/upsample blocks: a quarter of
    the output width, floored at 8."""
    return max(MIN_INTERNAL, out_channels // 4)


# ---------------------------------------------------------------------------
# declarative specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    out_channels: int
    internal_channels: int

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ShapeError(f"unknown block kind {self.kind!r}")
        if min(self.in_channels, self.out_channels, self.internal_channels) < 1:
            raise ShapeError("channel counts must be positive")
        if self.internal_channels > self.out_channels:
            raise ShapeError(
                f"internal width {self.internal_channels} exceeds output width "
                f"{self.out_channels}"
            )
        if self.kind == "Standard" and self.in_channels != self.out_channels:
            raise ShapeError(
                f"Standard blocks preserve channels; got {self.in_channels} -> "
                f"{self.out_channels}"
            )


@dataclass(frozen=True)
class NetworkSpec:
    blocks: tuple[BlockSpec, ...]
    num_classes: int = NUM_CLASSES
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ShapeError(f"unknown variant {self.variant!r}")
        for i in range(1, len(self.blocks)):
            prev, cur = self.blocks[i - 1], self.blocks[i]
            if prev.out_channels != cur.in_channels:
                raise ShapeError(
                    f"channel chain broken at block {i + 1}: "
                    f"{prev.out_channels} -> {cur.in_channels}"
                )


def network_spec(variant: str) -> NetworkSpec:
    """The 30-block layout; ``pruned`` substitutes 64 for 128 in blocks 7-24."""
    if variant not in VARIANTS:
        raise ShapeError(f"variant must be one of {VARIANTS}, got {variant!r}")
    mid = 128 if variant == "full" else 64

    def b(kind, cin, cout):
        return BlockSpec(kind, cin, cout, internal_width(cout))

    blocks = [b("Initial", 3, 16), b("Downsample", 16, 64)]
    blocks += [b("Standard", 64, 64)] * 4
    blocks += [b("Downsample", 64, mid)]
    blocks += [b("Standard", mid, mid)] * 17
    blocks += [b("Upsample", mid, 64)]
    blocks += [b("Standard", 64, 64)] * 2
    blocks += [b("Upsample", 64, 16)]
    blocks += [b("Standard", 16, 16)]
    blocks += [BlockSpec("LastConv", 16, NUM_CLASSES, NUM_CLASSES)]
    return NetworkSpec(blocks=tuple(blocks), num_classes=NUM_CLASSES, variant=variant)


# ---------------------------------------------------------------------------
# concrete blocks
# ---------------------------------------------------------------------------


class InitialBlock:
    """3x3 stride-2 convolution concatenated with a 2x2 maxpool of the
    input; the conv supplies out_ch - in_ch channels, the pool the rest."""

    kind = "Initial"

    def __init__(self, spec: BlockSpec, rng=None, dtype=np.float32):
        if spec.out_channels <= spec.in_channels:
            raise ShapeError(
                f"Initial block needs out_channels > in_channels "
                f"(conv would get {spec.out_channels - spec.in_channels} filters)"
            )
        self.spec = spec
        self.conv = init_conv_weights(
            "standard",
            spec.in_channels,
            spec.out_channels - spec.in_channels,
            3,
            stride=2,
            padding=1,
            rng=rng,
            dtype=dtype,
        )

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return concat_channels(conv2d(x, self.conv), maxpool2d(x))

    def named_layers(self):
        yield "conv", self.conv


class FactorizedBlock:
    """Residual unit: 1x1 projection, relu, 3x3 depthwise (stride 2 for
    Downsample), 1x1 expansion, batchnorm on the main branch; identity or
    maxpool+zero-pad shortcut; relu after the elementwise sum.

    ``shortcut_select`` (Downsample only) lists which input channels the
    shortcut forwards before zero padding; structured pruning installs it
    when surviving output channels no longer align one-to-one with the
    pooled input.
    """

    def __init__(self, spec: BlockSpec, rng=None, dtype=np.float32):
        if spec.kind not in ("Standard", "Downsample"):
            raise ShapeError(f"FactorizedBlock cannot be of kind {spec.kind!r}")
        self.spec = spec
        self.kind = spec.kind
        stride = 2 if spec.kind == "Downsample" else 1
        self.project = init_conv_weights(
            "pointwise", spec.in_channels, spec.internal_channels, 1, rng=rng, dtype=dtype
        )
        self.depthwise = init_conv_weights(
            "depthwise",
            spec.internal_channels,
            spec.internal_channels,
            3,
            stride=stride,
            padding=1,
            rng=rng,
            dtype=dtype,
        )
        self.expand = init_conv_weights(
            "pointwise", spec.internal_channels, spec.out_channels, 1, rng=rng, dtype=dtype
        )
        self.bn = init_batchnorm(spec.out_channels, dtype=dtype)
        self.shortcut_select: np.ndarray | None = None

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        a = relu(pointwise_conv2d(x, self.project))
        a = depthwise_conv2d(a, self.depthwise)
        a = pointwise_conv2d(a, self.expand)
        a = batchnorm(a, self.bn, mode="train" if training else "infer")
        if self.kind == "Standard":
            b = x
        else:
            b = maxpool2d(x)
            if self.shortcut_select is not None:
                b = select_channels(b, self.shortcut_select)
            b = pad_channels(b, self.spec.out_channels)
        return relu(add_elementwise(a, b))

    def named_layers(self):
        yield "project", self.project
        yield "depthwise", self.depthwise
        yield "expand", self.expand
        yield "bn", self.bn


class UpsampleBlock:
    """Decoder unit: 1x1 projection, 3x3 stride-2 transposed convolution,
    1x1 expansion, batchnorm; shortcut is a 1x1 convolution followed by
    nearest-neighbor 2x upsampling. Doubles H and W."""

    kind = "Upsample"

    def __init__(self, spec: BlockSpec, rng=None, dtype=np.float32):
        if spec.in_channels < spec.out_channels:
            raise ShapeError(
                f"Upsample block reduces channels; got {spec.in_channels} -> "
                f"{spec.out_channels}"
            )
        self.spec = spec
        self.project = init_conv_weights(
            "pointwise", spec.in_channels, spec.internal_channels, 1, rng=rng, dtype=dtype
        )
        self.tconv = init_conv_weights(
            "transposed",
            spec.internal_channels,
            spec.internal_channels,
            3,
            stride=2,
            rng=rng,
            dtype=dtype,
        )
        self.expand = init_conv_weights(
            "pointwise", spec.internal_channels, spec.out_channels, 1, rng=rng, dtype=dtype
        )
        self.shortcut = init_conv_weights(
            "pointwise", spec.in_channels, spec.out_channels, 1, rng=rng, dtype=dtype
        )
        self.bn = init_batchnorm(spec.out_channels, dtype=dtype)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        a = pointwise_conv2d(x, self.project)
        a = transposed_conv2d(a, self.tconv)
        a = pointwise_conv2d(a, self.expand)
        a = batchnorm(a, self.bn, mode="train" if training else "infer")
        b = upsample_nearest2x(pointwise_conv2d(x, self.shortcut))
        return relu(add_elementwise(a, b))

    def named_layers(self):
        yield "project", self.project
        yield "tconv", self.tconv
        yield "expand", self.expand
        yield "shortcut", self.shortcut
        yield "bn", self.bn


class LastConvBlock:
    """Single stride-2 transposed convolution emitting class logits; no
    activation so consumers can work in log space."""

    kind = "LastConv"

    def __init__(self, spec: BlockSpec, rng=None, dtype=np.float32):
        self.spec = spec
        self.tconv = init_conv_weights(
            "transposed", spec.in_channels, spec.out_channels, 3, stride=2, rng=rng, dtype=dtype
        )

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return transposed_conv2d(x, self.tconv)

    def named_layers(self):
        yield "tconv", self.tconv


def build_initial_block(in_ch: int, out_ch: int, rng=None, dtype=np.float32) -> InitialBlock:
    return InitialBlock(BlockSpec("Initial", in_ch, out_ch, out_ch), rng=rng, dtype=dtype)


def build_factorized_block(
    kind: str, in_ch: int, out_ch: int, internal_ch: int | None = None, rng=None, dtype=np.float32
) -> FactorizedBlock:
    if internal_ch is None:
        internal_ch = internal_width(out_ch)
    return FactorizedBlock(BlockSpec(kind, in_ch, out_ch, internal_ch), rng=rng, dtype=dtype)


def build_upsample_block(
    in_ch: int, out_ch: int, internal_ch: int | None = None, rng=None, dtype=np.float32
) -> UpsampleBlock:
    if internal_ch is None:
        internal_ch = internal_width(out_ch)
    return UpsampleBlock(BlockSpec("Upsample", in_ch, out_ch, internal_ch), rng=rng, dtype=dtype)


def build_lastconv(in_ch: int, num_classes: int, rng=None, dtype=np.float32) -> LastConvBlock:
    return LastConvBlock(
        BlockSpec("LastConv", in_ch, num_classes, num_classes), rng=rng, dtype=dtype
    )


_BLOCK_CLASSES = {
    "Initial": InitialBlock,
    "Downsample": FactorizedBlock,
    "Standard": FactorizedBlock,
    "Upsample": UpsampleBlock,
    "LastConv": LastConvBlock,
}


# ---------------------------------------------------------------------------
# the assembled network
# ---------------------------------------------------------------------------


@dataclass
class NetworkMeta:
    name: str
    seed: int
    prune_history: list = field(default_factory=list)


class Network:
    """Built, weighted, runnable model: an ordered list of blocks.

    Read-only during inference, so concurrent forward calls on one
    instance are safe; training and pruning require exclusive ownership.
    """

    def __init__(self, spec: NetworkSpec, blocks: list, meta: NetworkMeta):
        self.spec = spec
        self.blocks = blocks
        self.meta = meta

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        n, c, h, w = x.shape
        expect_c = self.spec.blocks[0].in_channels
        if c != expect_c:
            raise ShapeError(f"network expects {expect_c} input channels, got {c}")
        if h % 8 or w % 8:
            raise ShapeError(
                f"input spatial dims must be divisible by 8 (three 2x downsamples); "
                f"got {h}x{w}"
            )
        out = x
        for block in self.blocks:
            out = block.forward(out, training=training)
        return out

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for _, layer in self.named_layers():
            params.extend(layer.parameters())
        return params

    def named_layers(self):
        """Yields (layer_id, ConvWeights | BatchNormParams) in execution order."""
        for i, block in enumerate(self.blocks, start=1):
            for name, layer in block.named_layers():
                yield f"block{i:02d}.{name}", layer

    def layer(self, layer_id: str):
        for lid, layer in self.named_layers():
            if lid == layer_id:
                return layer
        raise ShapeError(f"unknown layer {layer_id!r}")

    def block_of(self, layer_id: str):
        idx = int(layer_id.split(".")[0].removeprefix("block"))
        return self.blocks[idx - 1]


def build_network(variant: str, seed: int = 0, dtype=np.float32) -> Network:
    spec = network_spec(variant)
    rng = np.random.default_rng(seed)
    blocks = [_BLOCK_CLASSES[bs.kind](bs, rng=rng, dtype=dtype) for bs in spec.blocks]
    meta = NetworkMeta(name=f"navseg-{variant}", seed=seed)
    return Network(spec, blocks, meta)


# ---------------------------------------------------------------------------
# pure shape arithmetic
# ---------------------------------------------------------------------------


def shape_trace(spec: NetworkSpec, input_shape) -> list[tuple[int, tuple[int, int, int]]]:
    """Predicted (block_index, (H, W, C)) output sizes; no weights touched.

    ``input_shape`` is an (H, W, C) triple, e.g. (512, 256, 3).
    """
    h, w, c = input_shape
    trace = []
    for i, b in enumerate(spec.blocks, start=1):
        if c != b.in_channels:
            raise ShapeError(
                f"block {i} expects {b.in_channels} input channels, trace carries {c}"
            )
        if b.kind in ("Initial", "Downsample"):
            if h % 2 or w % 2:
                raise ShapeError(f"block {i} halves spatial dims but got {h}x{w}")
            h, w = h // 2, w // 2
        elif b.kind in ("Upsample", "LastConv"):
            h, w = 2 * h, 2 * w
        c = b.out_channels
        trace.append((i, (h, w, c)))
    return trace
