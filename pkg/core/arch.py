"""
Declarative architecture descriptors.

An ArchDescriptor is an input shape plus an ordered list of layer specs.
Every spec knows its closed-form trainable and buffer counts and its
symbolic shape function, so large catalog networks can be counted and
shape-checked without allocating a single weight. Descriptors flagged
trainable can be instantiated as core.nn models.

Catalog variants were chosen to reproduce the published 4-class
parameter counts:
- alexnet            57,020,228
- resnet18           11,178,564
- squeezenet_v1_0       737,476
- vgg11_batchnorm   128,788,228 (plain VGG-11 gives 128,782,724; the 5,504
                                 difference is exactly the batchnorm gamma/beta)
- shufflenet_v2_x1_0  1,257,704
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Annotated, Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, model_validator

from core.errors import ArchitectureError
from core.models import DType
from core import nn

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


def _window_extent(size: int, kernel: int, stride: int, padding: int, ceil_mode: bool = False) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        return 0
    if not ceil_mode:
        return span // stride + 1
    out = math.ceil(span / stride) + 1
    # the last window must start inside the input or left padding
    if (out - 1) * stride >= size + padding:
        out -= 1
    return out


def _require_chw(kind: str, shape: Shape, channels: Optional[int] = None) -> None:
    if len(shape) != 3:
        raise ArchitectureError(f"{kind} expects a (C, H, W) input, got {shape}")
    if channels is not None and shape[0] != channels:
        raise ArchitectureError(f"{kind} expects {channels} input channels, got {shape[0]}")


class LayerSpecBase(BaseModel, ABC):
    """Kind-tagged layer hyperparameters with closed-form counts."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    @property
    def trainable_count(self) -> int:
        return 0

    @property
    def buffer_count(self) -> int:
        return 0

    @abstractmethod
    def output_shape(self, input_shape: Shape) -> Shape:
        pass

    def describe(self) -> str:
        fields = self.model_dump(exclude={"kind"})
        return " ".join(f"{k}={v}" for k, v in fields.items())

    def to_layer(self, rng: np.random.Generator, dtype: np.dtype) -> nn.Layer:
        raise ArchitectureError(f"{self.kind} is catalog-only and cannot be executed")


class DenseSpec(LayerSpecBase):
    kind: Literal["dense"] = "dense"
    in_features: int = Field(ge=1)
    out_features: int = Field(ge=1)
    bias: bool = True

    @property
    def trainable_count(self) -> int:
        return self.in_features * self.out_features + (self.out_features if self.bias else 0)

    def output_shape(self, input_shape: Shape) -> Shape:
        if tuple(input_shape) != (self.in_features,):
            raise ArchitectureError(f"dense expects ({self.in_features},), got {input_shape}")
        return (self.out_features,)

    def to_layer(self, rng: np.random.Generator, dtype: np.dtype) -> nn.Layer:
        return nn.Dense(self.in_features, self.out_features, bias=self.bias, rng=rng, dtype=dtype)


class Conv2dSpec(LayerSpecBase):
    kind: Literal["conv2d"] = "conv2d"
    in_channels: int = Field(ge=1)
    out_channels: int = Field(ge=1)
    kernel_size: int = Field(ge=1)
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)
    groups: int = Field(default=1, ge=1)
    bias: bool = True

    @model_validator(mode="after")
    def validate_groups(self) -> Conv2dSpec:
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(f"groups={self.groups} must divide both channel counts")
        return self

    @property
    def trainable_count(self) -> int:
        per_filter = (self.in_channels // self.groups) * self.kernel_size ** 2
        return self.out_channels * per_filter + (self.out_channels if self.bias else 0)

    def output_shape(self, input_shape: Shape) -> Shape:
        _require_chw("conv2d", input_shape, self.in_channels)
        h = _window_extent(input_shape[1], self.kernel_size, self.stride, self.padding)
        w = _window_extent(input_shape[2], self.kernel_size, self.stride, self.padding)
        if h < 1 or w < 1:
            raise ArchitectureError(f"conv2d kernel {self.kernel_size} does not fit {input_shape}")
        return (self.out_channels, h, w)

    def to_layer(self, rng: np.random.Generator, dtype: np.dtype) -> nn.Layer:
        if self.groups != 1:
            raise ArchitectureError("grouped conv2d is catalog-only")
        return nn.Conv2d(
            self.in_channels,
            self.out_channels,
            self.kernel_size,
            stride=self.stride,
            padding=self.padding,
            bias=self.bias,
            rng=rng,
            dtype=dtype,
        )


class MaxPool2dSpec(LayerSpecBase):
    kind: Literal["maxpool2d"] = "maxpool2d"
    kernel_size: int = Field(ge=1)
    stride: Optional[int] = Field(default=None, ge=1)
    padding: int = Field(default=0, ge=0)
    ceil_mode: bool = False

    @property
    def effective_stride(self) -> int:
        return self.stride or self.kernel_size

    def output_shape(self, input_shape: Shape) -> Shape:
        _require_chw("maxpool2d", input_shape)
        s = self.effective_stride
        h = _window_extent(input_shape[1], self.kernel_size, s, self.padding, self.ceil_mode)
        w = _window_extent(input_shape[2], self.kernel_size, s, self.padding, self.ceil_mode)
        if h < 1 or w < 1:
            raise ArchitectureError(f"maxpool2d window {self.kernel_size} does not fit {input_shape}")
        return (input_shape[0], h, w)

    def to_layer(self, rng: np.random.Generator, dtype: np.dtype) -> nn.Layer:
        if self.ceil_mode:
            raise ArchitectureError("ceil-mode maxpool2d is catalog-only")
        return nn.MaxPool2d(self.kernel_size, stride=self.effective_stride, padding=self.padding)


class AdaptiveAvgPool2dSpec(LayerSpecBase):
    kind: Literal["adaptive_avgpool2d"] = "adaptive_avgpool2d"
    output_size: int = Field(default=1, ge=1)

    def output_shape(self, input_shape: Shape) -> Shape:
        _require_chw("adaptive_avgpool2d", input_shape)
        return (input_shape[0], self.output_size, self.output_size)


class ReluSpec(LayerSpecBase):
    kind: Literal["relu"] = "relu"

    def output_shape(self, input_shape: Shape) -> Shape:
        return tuple(input_shape)

    def to_layer(self, rng: np.random.Generator, dtype: np.dtype) -> nn.Layer:
        return nn.ReLU()


class FlattenSpec(LayerSpecBase):
    kind: Literal["flatten"] = "flatten"

    def output_shape(self, input_shape: Shape) -> Shape:
        return (int(np.prod(input_shape)),)

    def to_layer(self, rng: np.random.Generator, dtype: np.dtype) -> nn.Layer:
        return nn.Flatten()


class BatchNorm2dSpec(LayerSpecBase):
    kind: Literal["batchnorm2d"] = "batchnorm2d"
    num_features: int = Field(ge=1)

    @property
    def trainable_count(self) -> int:
        return 2 * self.num_features

    @property
    def buffer_count(self) -> int:
        return 2 * self.num_features

    def output_shape(self, input_shape: Shape) -> Shape:
        _require_chw("batchnorm2d", input_shape, self.num_features)
        return tuple(input_shape)

    def to_layer(self, rng: np.random.Generator, dtype: np.dtype) -> nn.Layer:
        return nn.BatchNorm2d(self.num_features, dtype=dtype)


class FireSpec(LayerSpecBase):
    """SqueezeNet fire module: 1x1 squeeze, then concatenated 1x1 and 3x3 expands."""

    kind: Literal["fire"] = "fire"
    in_channels: int = Field(ge=1)
    squeeze: int = Field(ge=1)
    expand1x1: int = Field(ge=1)
    expand3x3: int = Field(ge=1)

    @property
    def trainable_count(self) -> int:
        s = self.squeeze
        return (
            self.in_channels * s + s
            + s * self.expand1x1 + self.expand1x1
            + 9 * s * self.expand3x3 + self.expand3x3
        )

    def output_shape(self, input_shape: Shape) -> Shape:
        _require_chw("fire", input_shape, self.in_channels)
        return (self.expand1x1 + self.expand3x3, input_shape[1], input_shape[2])


class BasicBlockSpec(LayerSpecBase):
    """
    ResNet basic block: two bias-free 3x3 convs with batchnorm, plus a
    1x1 projection shortcut when the stride or channel count changes.
    """

    kind: Literal["basic_block"] = "basic_block"
    in_channels: int = Field(ge=1)
    out_channels: int = Field(ge=1)
    stride: int = Field(default=1, ge=1)

    @property
    def has_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels

    @property
    def _bn_channels(self) -> int:
        return self.out_channels * (3 if self.has_projection else 2)

    @property
    def trainable_count(self) -> int:
        i, o = self.in_channels, self.out_channels
        count = 9 * i * o + 9 * o * o
        if self.has_projection:
            count += i * o
        return count + 2 * self._bn_channels

    @property
    def buffer_count(self) -> int:
        return 2 * self._bn_channels

    def output_shape(self, input_shape: Shape) -> Shape:
        _require_chw("basic_block", input_shape, self.in_channels)
        h = _window_extent(input_shape[1], 3, self.stride, 1)
        w = _window_extent(input_shape[2], 3, self.stride, 1)
        return (self.out_channels, h, w)


class ShuffleBlockSpec(LayerSpecBase):
    """
    ShuffleNetV2 inverted residual. With stride 1 the input is split in two
    and only one half goes through the branch; with stride > 1 both branches
    see the full input and a depthwise 3x3 downsamples.
    """

    kind: Literal["shuffle_block"] = "shuffle_block"
    in_channels: int = Field(ge=1)
    out_channels: int = Field(ge=2)
    stride: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def validate_channels(self) -> ShuffleBlockSpec:
        if self.out_channels % 2:
            raise ValueError("shuffle_block out_channels must be even")
        if self.stride == 1 and self.in_channels != self.out_channels:
            raise ValueError("stride-1 shuffle_block keeps the channel count")
        return self

    @property
    def branch_features(self) -> int:
        return self.out_channels // 2

    @property
    def _bn_channels(self) -> int:
        bf = self.branch_features
        return 3 * bf + (self.in_channels + bf if self.stride > 1 else 0)

    @property
    def trainable_count(self) -> int:
        i, bf = self.in_channels, self.branch_features
        branch_in = i if self.stride > 1 else bf
        count = branch_in * bf + 9 * bf + bf * bf
        if self.stride > 1:
            count += 9 * i + i * bf
        return count + 2 * self._bn_channels

    @property
    def buffer_count(self) -> int:
        return 2 * self._bn_channels

    def output_shape(self, input_shape: Shape) -> Shape:
        _require_chw("shuffle_block", input_shape, self.in_channels)
        h = _window_extent(input_shape[1], 3, self.stride, 1)
        w = _window_extent(input_shape[2], 3, self.stride, 1)
        return (self.out_channels, h, w)


LayerSpec = Annotated[
    Union[
        DenseSpec,
        Conv2dSpec,
        MaxPool2dSpec,
        AdaptiveAvgPool2dSpec,
        ReluSpec,
        FlattenSpec,
        BatchNorm2dSpec,
        FireSpec,
        BasicBlockSpec,
        ShuffleBlockSpec,
    ],
    Field(discriminator="kind"),
]

_layer_adapter: TypeAdapter = TypeAdapter(LayerSpec)


class ArchDescriptor(BaseModel):
    """Named, shape-checked layer list ending in [num_classes] logits."""

    model_config = ConfigDict(frozen=True)

    name: str = Field(min_length=1)
    input_shape: Tuple[int, ...]
    num_classes: int = Field(ge=2)
    trainable: bool = False
    layers: List[LayerSpec] = Field(min_length=1)

    @model_validator(mode="after")
    def validate_shapes(self) -> ArchDescriptor:
        if not self.input_shape or any(d < 1 for d in self.input_shape):
            raise ArchitectureError(f"{self.name}: invalid input shape {self.input_shape}")
        final = self.layer_shapes()[-1]
        if final != (self.num_classes,):
            raise ArchitectureError(
                f"{self.name}: output shape {final} does not match {self.num_classes} classes"
            )
        return self

    def layer_shapes(self) -> List[Shape]:
        """Per-sample output shape after each layer."""
        shapes: List[Shape] = []
        shape: Shape = tuple(self.input_shape)
        for i, spec in enumerate(self.layers):
            try:
                shape = spec.output_shape(shape)
            except ArchitectureError as e:
                raise ArchitectureError(f"{self.name}: layer {i} ({spec.kind}): {e.message}") from e
            shapes.append(shape)
        return shapes

    @property
    def trainable_count(self) -> int:
        return sum(spec.trainable_count for spec in self.layers)

    @property
    def transmitted_count(self) -> int:
        return sum(spec.trainable_count + spec.buffer_count for spec in self.layers)

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def to_manifest(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "trainable": self.trainable,
            "trainable_count": self.trainable_count,
            "transmitted_count": self.transmitted_count,
        }


def param_count(arch: Union[ArchDescriptor, nn.Sequential]) -> int:
    """Trainable parameter count of a descriptor or a live model."""
    return arch.trainable_count


def transmitted_count(arch: Union[ArchDescriptor, nn.Sequential]) -> int:
    """Values carried by ModelParams: trainable parameters plus batchnorm running statistics."""
    return arch.transmitted_count


def concatenate(first: ArchDescriptor, second: ArchDescriptor, name: Optional[str] = None) -> ArchDescriptor:
    """Chain two descriptors; the second must accept the first's output."""
    if tuple(second.input_shape) != (first.num_classes,):
        raise ArchitectureError(
            f"cannot chain {first.name} -> {second.name}: "
            f"{(first.num_classes,)} vs {tuple(second.input_shape)}"
        )
    return ArchDescriptor(
        name=name or f"{first.name}+{second.name}",
        input_shape=first.input_shape,
        num_classes=second.num_classes,
        trainable=first.trainable and second.trainable,
        layers=list(first.layers) + list(second.layers),
    )


def layer_breakdown(arch: ArchDescriptor) -> List[Dict[str, Any]]:
    rows = []
    for i, (spec, shape) in enumerate(zip(arch.layers, arch.layer_shapes())):
        rows.append(
            {
                "index": i,
                "kind": spec.kind,
                "config": spec.describe(),
                "output_shape": list(shape),
                "trainable": spec.trainable_count,
                "buffers": spec.buffer_count,
            }
        )
    return rows


def build(arch: ArchDescriptor, seed: int = 0, dtype: DType = DType.FLOAT64) -> nn.Sequential:
    """Instantiate a trainable descriptor; weights drawn in layer order from the seed."""
    if not arch.trainable:
        raise ArchitectureError(f"{arch.name} is a catalog-only descriptor and cannot be built")
    rng = np.random.default_rng(seed)
    layers = [spec.to_layer(rng, dtype.numpy_dtype) for spec in arch.layers]
    model = nn.Sequential(layers, arch.input_shape, name=arch.name, dtype=dtype)
    if model.transmitted_count != arch.transmitted_count:
        raise ArchitectureError(
            f"{arch.name}: built model holds {model.transmitted_count} values, "
            f"descriptor declares {arch.transmitted_count}"
        )
    return model


# ---------------------------------------------------------------------------
# Built-in catalog
# ---------------------------------------------------------------------------

IMAGENET_INPUT: Shape = (3, 224, 224)


def _conv_bn_relu(cin: int, cout: int, k: int, s: int = 1, p: int = 0, bias: bool = False) -> List[Any]:
    return [
        Conv2dSpec(in_channels=cin, out_channels=cout, kernel_size=k, stride=s, padding=p, bias=bias),
        BatchNorm2dSpec(num_features=cout),
        ReluSpec(),
    ]


def tiny_mlp(num_classes: int = 4, input_shape: Shape = (16,), hidden: int = 32) -> ArchDescriptor:
    d = int(np.prod(input_shape))
    layers: List[Any] = [] if len(input_shape) == 1 else [FlattenSpec()]
    layers += [
        DenseSpec(in_features=d, out_features=hidden),
        ReluSpec(),
        DenseSpec(in_features=hidden, out_features=num_classes),
    ]
    return ArchDescriptor(
        name="tiny_mlp", input_shape=tuple(input_shape), num_classes=num_classes, trainable=True, layers=layers
    )


def _tiny_cnn_layers(input_shape: Shape, num_classes: int, batchnorm: bool) -> List[Any]:
    if len(input_shape) != 3:
        raise ArchitectureError(f"tiny_cnn needs a (C, H, W) input, got {input_shape}")
    c, h, w = input_shape
    filters = 8
    if batchnorm:
        head = [
            Conv2dSpec(in_channels=c, out_channels=filters, kernel_size=3, padding=1, bias=False),
            BatchNorm2dSpec(num_features=filters),
        ]
    else:
        head = [Conv2dSpec(in_channels=c, out_channels=filters, kernel_size=3, padding=1)]
    return head + [
        ReluSpec(),
        MaxPool2dSpec(kernel_size=2),
        FlattenSpec(),
        DenseSpec(in_features=filters * (h // 2) * (w // 2), out_features=num_classes),
    ]


def tiny_cnn(num_classes: int = 4, input_shape: Shape = (1, 16, 16)) -> ArchDescriptor:
    return ArchDescriptor(
        name="tiny_cnn",
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        trainable=True,
        layers=_tiny_cnn_layers(tuple(input_shape), num_classes, batchnorm=False),
    )


def tiny_cnn_bn(num_classes: int = 4, input_shape: Shape = (1, 16, 16)) -> ArchDescriptor:
    return ArchDescriptor(
        name="tiny_cnn_bn",
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        trainable=True,
        layers=_tiny_cnn_layers(tuple(input_shape), num_classes, batchnorm=True),
    )


def alexnet(num_classes: int = 4) -> ArchDescriptor:
    layers: List[Any] = [
        Conv2dSpec(in_channels=3, out_channels=64, kernel_size=11, stride=4, padding=2),
        ReluSpec(),
        MaxPool2dSpec(kernel_size=3, stride=2),
        Conv2dSpec(in_channels=64, out_channels=192, kernel_size=5, padding=2),
        ReluSpec(),
        MaxPool2dSpec(kernel_size=3, stride=2),
        Conv2dSpec(in_channels=192, out_channels=384, kernel_size=3, padding=1),
        ReluSpec(),
        Conv2dSpec(in_channels=384, out_channels=256, kernel_size=3, padding=1),
        ReluSpec(),
        Conv2dSpec(in_channels=256, out_channels=256, kernel_size=3, padding=1),
        ReluSpec(),
        MaxPool2dSpec(kernel_size=3, stride=2),
        AdaptiveAvgPool2dSpec(output_size=6),
        FlattenSpec(),
        DenseSpec(in_features=256 * 6 * 6, out_features=4096),
        ReluSpec(),
        DenseSpec(in_features=4096, out_features=4096),
        ReluSpec(),
        DenseSpec(in_features=4096, out_features=num_classes),
    ]
    return ArchDescriptor(name="alexnet", input_shape=IMAGENET_INPUT, num_classes=num_classes, layers=layers)


def resnet18(num_classes: int = 4) -> ArchDescriptor:
    layers: List[Any] = _conv_bn_relu(3, 64, k=7, s=2, p=3)
    layers.append(MaxPool2dSpec(kernel_size=3, stride=2, padding=1))
    channels = 64
    for width, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
        layers.append(BasicBlockSpec(in_channels=channels, out_channels=width, stride=stride))
        layers.append(BasicBlockSpec(in_channels=width, out_channels=width))
        channels = width
    layers += [
        AdaptiveAvgPool2dSpec(output_size=1),
        FlattenSpec(),
        DenseSpec(in_features=512, out_features=num_classes),
    ]
    return ArchDescriptor(name="resnet18", input_shape=IMAGENET_INPUT, num_classes=num_classes, layers=layers)


def squeezenet_v1_0(num_classes: int = 4) -> ArchDescriptor:
    pool = MaxPool2dSpec(kernel_size=3, stride=2, ceil_mode=True)
    layers: List[Any] = [
        Conv2dSpec(in_channels=3, out_channels=96, kernel_size=7, stride=2),
        ReluSpec(),
        pool,
        FireSpec(in_channels=96, squeeze=16, expand1x1=64, expand3x3=64),
        FireSpec(in_channels=128, squeeze=16, expand1x1=64, expand3x3=64),
        FireSpec(in_channels=128, squeeze=32, expand1x1=128, expand3x3=128),
        pool,
        FireSpec(in_channels=256, squeeze=32, expand1x1=128, expand3x3=128),
        FireSpec(in_channels=256, squeeze=48, expand1x1=192, expand3x3=192),
        FireSpec(in_channels=384, squeeze=48, expand1x1=192, expand3x3=192),
        FireSpec(in_channels=384, squeeze=64, expand1x1=256, expand3x3=256),
        pool,
        FireSpec(in_channels=512, squeeze=64, expand1x1=256, expand3x3=256),
        # classifier: 1x1 conv to num_classes, then global average
        Conv2dSpec(in_channels=512, out_channels=num_classes, kernel_size=1),
        ReluSpec(),
        AdaptiveAvgPool2dSpec(output_size=1),
        FlattenSpec(),
    ]
    return ArchDescriptor(
        name="squeezenet_v1_0", input_shape=IMAGENET_INPUT, num_classes=num_classes, layers=layers
    )


def vgg11_batchnorm(num_classes: int = 4) -> ArchDescriptor:
    layers: List[Any] = []
    channels = 3
    for v in (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"):
        if v == "M":
            layers.append(MaxPool2dSpec(kernel_size=2, stride=2))
        else:
            layers += _conv_bn_relu(channels, int(v), k=3, p=1, bias=True)
            channels = int(v)
    layers += [
        AdaptiveAvgPool2dSpec(output_size=7),
        FlattenSpec(),
        DenseSpec(in_features=512 * 7 * 7, out_features=4096),
        ReluSpec(),
        DenseSpec(in_features=4096, out_features=4096),
        ReluSpec(),
        DenseSpec(in_features=4096, out_features=num_classes),
    ]
    return ArchDescriptor(
        name="vgg11_batchnorm", input_shape=IMAGENET_INPUT, num_classes=num_classes, layers=layers
    )


def shufflenet_v2_x1_0(num_classes: int = 4) -> ArchDescriptor:
    layers: List[Any] = _conv_bn_relu(3, 24, k=3, s=2, p=1)
    layers.append(MaxPool2dSpec(kernel_size=3, stride=2, padding=1))
    channels = 24
    for width, repeats in ((116, 4), (232, 8), (464, 4)):
        layers.append(ShuffleBlockSpec(in_channels=channels, out_channels=width, stride=2))
        layers += [ShuffleBlockSpec(in_channels=width, out_channels=width) for _ in range(repeats - 1)]
        channels = width
    layers += _conv_bn_relu(channels, 1024, k=1)
    layers += [
        AdaptiveAvgPool2dSpec(output_size=1),
        FlattenSpec(),
        DenseSpec(in_features=1024, out_features=num_classes),
    ]
    return ArchDescriptor(
        name="shufflenet_v2_x1_0", input_shape=IMAGENET_INPUT, num_classes=num_classes, layers=layers
    )


CATALOG: Dict[str, Callable[..., ArchDescriptor]] = {
    "tiny_mlp": tiny_mlp,
    "tiny_cnn": tiny_cnn,
    "tiny_cnn_bn": tiny_cnn_bn,
    "alexnet": alexnet,
    "resnet18": resnet18,
    "squeezenet_v1_0": squeezenet_v1_0,
    "vgg11_batchnorm": vgg11_batchnorm,
    "shufflenet_v2_x1_0": shufflenet_v2_x1_0,
}

DESK_MODELS = ("tiny_mlp", "tiny_cnn", "tiny_cnn_bn")


def list_archs() -> List[str]:
    return list(CATALOG)


def get_arch(name: str, num_classes: int = 4, input_shape: Optional[Sequence[int]] = None) -> ArchDescriptor:
    """
    Look up a built-in descriptor.

    Args:
        name: Catalog name.
        num_classes: Width of the classifier head.
        input_shape: Per-sample input shape; only desk models accept one.

    Raises:
        ArchitectureError: unknown name, or an input shape for a catalog-only network.
    """
    factory = CATALOG.get(name)
    if factory is None:
        raise ArchitectureError(f"Unknown architecture: {name!r}", {"known": list_archs()})
    if input_shape is None:
        return factory(num_classes=num_classes)
    if name not in DESK_MODELS:
        raise ArchitectureError(f"{name} has a fixed {IMAGENET_INPUT} input")
    return factory(num_classes=num_classes, input_shape=tuple(int(d) for d in input_shape))


# ---------------------------------------------------------------------------
# Architecture files
# ---------------------------------------------------------------------------

_TRUE = {"true", "yes", "1"}
_FALSE = {"false", "no", "0"}


def _parse_pairs(tokens: Sequence[str], lineno: int) -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or not key:
            raise ArchitectureError(f"line {lineno}: expected key=value, got {tok!r}")
        pairs[key.strip().lower()] = value.strip()
    return pairs


def parse_arch_text(text: str) -> ArchDescriptor:
    """
    Parse an architecture file.

    Format:
        arch name=<id> input=<c,h,w|d> classes=<n> trainable=<true|false>
        <kind> key=value ...
    Blank lines are ignored and '#' starts a comment.
    """
    header: Optional[Dict[str, str]] = None
    layers: List[Any] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *rest = line.split()
        pairs = _parse_pairs(rest, lineno)
        if header is None:
            if kind != "arch":
                raise ArchitectureError(f"line {lineno}: file must start with an 'arch' line")
            header = pairs
            continue
        try:
            layers.append(_layer_adapter.validate_python({"kind": kind.lower(), **pairs}))
        except ValidationError as e:
            raise ArchitectureError(f"line {lineno}: invalid {kind} layer: {e.errors()[0]['msg']}") from e

    if header is None:
        raise ArchitectureError("architecture file is empty")
    missing = {"name", "input", "classes"} - set(header)
    if missing:
        raise ArchitectureError(f"arch line is missing {sorted(missing)}")
    trainable = header.get("trainable", "false").lower()
    if trainable not in _TRUE | _FALSE:
        raise ArchitectureError(f"trainable must be true or false, got {trainable!r}")
    try:
        input_shape = tuple(int(d) for d in header["input"].split(","))
        return ArchDescriptor(
            name=header["name"],
            input_shape=input_shape,
            num_classes=int(header["classes"]),
            trainable=trainable in _TRUE,
            layers=layers,
        )
    except (ValueError, ValidationError) as e:
        raise ArchitectureError(f"invalid architecture header: {e}") from e


def load_arch_file(path: Union[str, Path]) -> ArchDescriptor:
    path = Path(path)
    if not path.is_file():
        raise ArchitectureError(f"architecture file not found: {path}")
    arch = parse_arch_text(path.read_text(encoding="utf-8"))
    logger.debug("Loaded architecture file", extra={"path": str(path), "arch": arch.name})
    return arch


def resolve_arch(name_or_path: str, num_classes: int = 4, input_shape: Optional[Sequence[int]] = None) -> ArchDescriptor:
    """Catalog name, or a path to an architecture file."""
    if name_or_path in CATALOG:
        return get_arch(name_or_path, num_classes=num_classes, input_shape=input_shape)
    if Path(name_or_path).suffix or Path(name_or_path).exists():
        arch = load_arch_file(name_or_path)
        if arch.num_classes != num_classes:
            raise ArchitectureError(
                f"{arch.name} has {arch.num_classes} classes, the run needs {num_classes}"
            )
        return arch
    return get_arch(name_or_path, num_classes=num_classes, input_shape=input_shape)


__all__ = [
    "LayerSpec",
    "DenseSpec",
    "Conv2dSpec",
    "MaxPool2dSpec",
    "AdaptiveAvgPool2dSpec",
    "ReluSpec",
    "FlattenSpec",
    "BatchNorm2dSpec",
    "FireSpec",
    "BasicBlockSpec",
    "ShuffleBlockSpec",
    "ArchDescriptor",
    "param_count",
    "transmitted_count",
    "concatenate",
    "layer_breakdown",
    "build",
    "get_arch",
    "list_archs",
    "resolve_arch",
    "parse_arch_text",
    "load_arch_file",
    "CATALOG",
]
