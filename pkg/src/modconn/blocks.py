"""Residual blocks and bottleneck branches: the vertices of a module graph.

Ordering follows the original ResNet recipe: conv -> BN -> ReLU, with the
residual addition after the last BN and a ReLU after the addition.  A
bottleneck *branch* has no shortcut of its own; in the multi-branch family
the residual is added where branch outputs are aggregated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import BatchNormState, Tensor

BLOCK_KINDS = ("basic", "bottleneck")


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    out_channels: int
    width: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}; expected one of {BLOCK_KINDS}")
        if self.in_channels < 1 or self.out_channels < 1 or self.stride < 1:
            raise ConfigError(f"channels and stride must be positive: {self}")
        if self.kind == "bottleneck" and self.width < 1:
            raise ConfigError(f"bottleneck blocks need width >= 1, got {self.width}")

    def conv_shapes(self) -> dict[str, tuple[int, int, int, int]]:
        if self.kind == "basic":
            return {
                "conv1": (self.out_channels, self.in_channels, 3, 3),
                "conv2": (self.out_channels, self.out_channels, 3, 3),
            }
        return {
            "conv1": (self.width, self.in_channels, 1, 1),
            "conv2": (self.width, self.width, 3, 3),
            "conv3": (self.out_channels, self.width, 1, 1),
        }

    def bn_channels(self) -> dict[str, int]:
        return {name.replace("conv", "bn"): shape[0] for name, shape in self.conv_shapes().items()}

    def output_shape(self, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"block expects {self.in_channels} input channels, got input shape {in_shape}")
        return (self.out_channels, (h - 1) // self.stride + 1, (w - 1) // self.stride + 1)


def param_count(spec: BlockSpec) -> int:
    """Learnable scalars of one block: conv filters plus BN scale and shift."""
    convs = sum(int(np.prod(s)) for s in spec.conv_shapes().values())
    return convs + 2 * sum(spec.bn_channels().values())


@dataclass
class BlockParams:
    """Learnable tensors of a block, keyed by role, plus BN running statistics."""

    spec: BlockSpec
    tensors: dict[str, Tensor] = field(default_factory=dict)
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def astype(self, dtype) -> "BlockParams":
        T.parameters_as(self.tensors.values(), dtype)
        self.bn = {k: s.astype(dtype) for k, s in self.bn.items()}
        return self

    def zero_weights(self) -> "BlockParams":
        for role, t in self.tensors.items():
            if role.startswith("conv"):
                t.data[...] = 0
        return self


def init_block(spec: BlockSpec, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE) -> BlockParams:
    """He-normal (fan-in) conv filters, BN scale 1 and shift 0."""
    params = BlockParams(spec)
    for conv, shape in spec.conv_shapes().items():
        fan_in = shape[1] * shape[2] * shape[3]
        params.tensors[conv] = Tensor((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype), requires_grad=True)
        bn = conv.replace("conv", "bn")
        params.tensors[f"{bn}_scale"] = Tensor(np.ones(shape[0], dtype=dtype), requires_grad=True)
        params.tensors[f"{bn}_shift"] = Tensor(np.zeros(shape[0], dtype=dtype), requires_grad=True)
        params.bn[bn] = BatchNormState.fresh(shape[0], dtype)
    return params


def _conv_bn(x: Tensor, p: BlockParams, idx: int, stride: int, pad: int, training: bool) -> Tensor:
    y = T.conv2d(x, p.tensors[f"conv{idx}"], stride, pad)
    return T.batchnorm(y, p.tensors[f"bn{idx}_scale"], p.tensors[f"bn{idx}_shift"], p.bn[f"bn{idx}"], training)


def _check_input(x: Tensor, spec: BlockSpec) -> None:
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"block expects (N, {spec.in_channels}, H, W) input, got {x.shape}")


def shortcut(x: Tensor, spec: BlockSpec) -> Tensor:
    """Parameter-free identity path: average-downsample by the stride, then zero-pad channels."""
    return T.zero_pad_channels(T.avg_downsample(x, spec.stride), spec.out_channels)


def residual_function(x: Tensor, p: BlockParams, training: bool = True) -> Tensor:
    """F(x): the learned residual of a basic block (conv3x3-BN-ReLU-conv3x3-BN)."""
    spec = p.spec
    _check_input(x, spec)
    h = T.relu(_conv_bn(x, p, 1, spec.stride, 1, training))
    return _conv_bn(h, p, 2, 1, 1, training)


def basic_block_forward(x: Tensor, p: BlockParams, training: bool = True) -> Tensor:
    """G(x) = ReLU(F(x) + shortcut(x)) for a two-conv basic block."""
    if p.spec.kind != "basic":
        raise ConfigError(f"basic_block_forward needs a basic block, got {p.spec.kind}")
    return T.relu(T.add(residual_function(x, p, training), shortcut(x, p.spec)))


def bottleneck_branch_forward(x: Tensor, p: BlockParams, training: bool = True) -> Tensor:
    """Branch F(x): 1x1(w)-BN-ReLU-3x3(w, stride)-BN-ReLU-1x1(out)-BN, no shortcut and no final ReLU."""
    spec = p.spec
    if spec.kind != "bottleneck":
        raise ConfigError(f"bottleneck_branch_forward needs a bottleneck block, got {spec.kind}")
    _check_input(x, spec)
    h = T.relu(_conv_bn(x, p, 1, 1, 0, training))
    h = T.relu(_conv_bn(h, p, 2, spec.stride, 1, training))
    return _conv_bn(h, p, 3, 1, 0, training)


def bottleneck_block_forward(x: Tensor, p: BlockParams, training: bool = True) -> Tensor:
    """Residual bottleneck block (single-branch family): ReLU(F(x) + shortcut(x))."""
    return T.relu(T.add(bottleneck_branch_forward(x, p, training), shortcut(x, p.spec)))
