"""Masked module graphs: builders, forward/backward execution and checkpoints.

Two families are supported.

``resnet``
    A stack of residual blocks.  Block j's input is the sum of the outputs of
    the blocks selected by its mask among all earlier blocks 1..j-1; outputs
    from earlier stages are average-downsampled and zero-padded to fit.

``resnext``
    A stack of multi-branch modules with ``cardinality`` bottleneck branches
    each.  Branch j of module i+1 reads

        x[i+1, j] = ReLU(P_i(x[i, j]) + sum_k m[i+1, j, k] * F[i, k])

    where ``F[i, k]`` is the k-th branch output of module i and ``P_i`` is
    the module's shortcut (identity, or a strided 1x1 projection where the
    module changes shape).  With every mask entry set this is exactly the
    fixed ResNeXt recursion ``x[i+1] = ReLU(P_i(x[i]) + sum_k F[i, k](x[i]))``.
    The network output averages the identity terms of the last module's
    branches (accumulated in float64, so identical terms average exactly).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .blocks import (
    BlockParams,
    BlockSpec,
    basic_block_forward,
    bottleneck_block_forward,
    bottleneck_branch_forward,
    init_block,
)
from .connectivity import (
    MaskState,
    aggregate,
    live_elements,
    mask_gradient,
    sample_binary,
    topk_binary,
    weighted_aggregate,
)
from .errors import ConfigError, ShapeError
from .tensor import BatchNormState, Tensor

logger = logging.getLogger(__name__)

FAMILIES = ("resnet", "resnext")
CONNECTIVITY_MODES = ("learned", "fixed_prev", "fixed_random", "fixed_full")
CHECKPOINT_VERSION = 1


@dataclass
class ArchSpec:
    """Shape of a masked network.

    ``stage_channels`` are the block (resnet) or module (resnext) output
    channels per stage; the spatial size halves at each stage boundary.
    ``bottleneck_width`` is the branch width in the first stage and doubles
    with every stage.
    """

    family: str = "resnext"
    num_modules: int = 6
    fan_in: int = 1
    cardinality: int = 8
    bottleneck_width: int = 4
    num_classes: int = 100
    connectivity: str = "learned"
    connectivity_seed: int = 0
    block_kind: str = "basic"
    stem_channels: int = 16
    stage_channels: tuple[int, ...] | None = None
    module_stages: tuple[int, ...] | None = None
    image_size: int = 32
    in_channels: int = 3

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.connectivity not in CONNECTIVITY_MODES:
            raise ConfigError(f"unknown connectivity {self.connectivity!r}; expected one of {CONNECTIVITY_MODES}")
        if self.stage_channels is None:
            self.stage_channels = (16, 32, 64) if self.family == "resnet" else (64, 128, 256)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.num_modules < 1:
            raise ConfigError(f"num_modules must be >= 1, got {self.num_modules}")
        if self.module_stages is None:
            s = len(self.stage_channels)
            self.module_stages = tuple(i * s // self.num_modules for i in range(self.num_modules))
        self.module_stages = tuple(int(s) for s in self.module_stages)
        stages = self.module_stages
        if len(stages) != self.num_modules or stages[0] != 0 or any(b - a not in (0, 1) for a, b in zip(stages, stages[1:])):
            raise ConfigError(f"module_stages must start at 0 and grow by at most 1 per module, got {stages}")
        if stages[-1] >= len(self.stage_channels):
            raise ConfigError(f"module_stages reference stage {stages[-1]} but only {len(self.stage_channels)} stage widths given")
        if self.image_size % (2 ** stages[-1]):
            raise ConfigError(f"image size {self.image_size} cannot be halved {stages[-1]} times")
        if self.family == "resnet":
            if self.block_kind not in ("basic", "bottleneck"):
                raise ConfigError(f"unknown resnet block kind {self.block_kind!r}")
            max_candidates = max(self.num_modules - 1, 1)
        else:
            if self.cardinality < 1 or self.bottleneck_width < 1:
                raise ConfigError("resnext needs cardinality >= 1 and bottleneck_width >= 1")
            max_candidates = self.cardinality
        if self.connectivity != "fixed_full" and not 1 <= self.fan_in <= max_candidates:
            raise ConfigError(f"fan-in must satisfy 1 <= K <= {max_candidates} for this architecture, got {self.fan_in}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def depth(self) -> int:
        per_block = 2 if self.family == "resnet" and self.block_kind == "basic" else 3
        return 2 + per_block * self.num_modules

    @classmethod
    def from_depth(cls, family: str, depth: int, **kw) -> "ArchSpec":
        per_block = 2 if family == "resnet" and kw.get("block_kind", "basic") == "basic" else 3
        if (depth - 2) % per_block:
            raise ConfigError(f"depth {depth} is not 2 + {per_block} * L for family {family}")
        return cls(family=family, num_modules=(depth - 2) // per_block, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["module_stages"] = list(self.module_stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        for key in ("stage_channels", "module_stages"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Node:
    """An aggregation point: the input of one block, or the network output."""

    id: str
    shape: tuple[int, int, int]
    producers: list[str] = field(default_factory=list)
    mask: MaskState | None = None
    identity: list[str] = field(default_factory=list)
    projection: str | None = None
    relu: bool = False


@dataclass
class Block:
    id: str
    params: BlockParams
    input: str
    forward: str  # "basic" | "bottleneck_block" | "branch"

    @property
    def spec(self) -> BlockSpec:
        return self.params.spec


@dataclass
class Projection:
    weight: Tensor
    stride: int


_BLOCK_FORWARD = {
    "basic": basic_block_forward,
    "bottleneck_block": bottleneck_block_forward,
    "branch": bottleneck_branch_forward,
}


class ModuleGraph:
    """Executable masked network: stem, blocks, aggregation nodes and head."""

    output_node = "out"

    def __init__(self, arch: ArchSpec):
        self.arch = arch
        self.nodes: dict[str, Node] = {}
        self.blocks: dict[str, Block] = {}
        self.projections: dict[str, Projection] = {}
        self.stem: BlockParams | None = None
        self.head_weight: Tensor | None = None
        self.head_bias: Tensor | None = None
        self.removed_blocks: list[str] = []
        self.frozen_features = False
        self._schedule: list[tuple[str, str]] = []
        self._block_ids: list[str] = []

    # -- structure ---------------------------------------------------------

    @property
    def masks(self) -> dict[str, MaskState]:
        return {n.id: n.mask for n in self.nodes.values() if n.mask is not None}

    def learned_masks(self) -> list[MaskState]:
        return [m for m in self.masks.values() if not m.frozen]

    def schedule(self) -> list[tuple[str, str]]:
        """Topological order of present nodes and blocks."""
        return [(k, n) for k, n in self._schedule if (n in self.nodes if k == "node" else n in self.blocks)]

    def all_block_ids(self) -> list[str]:
        return list(self._block_ids)

    def block_order(self, name: str) -> int:
        return self._block_ids.index(name)

    def effective_binary(self, mask: MaskState) -> np.ndarray:
        """Frozen masks as stored; trainable masks by their current top-K."""
        return mask.binary if mask.frozen else topk_binary(mask.real, mask.fan_in)

    def active_producers(self, node: Node) -> np.ndarray:
        if node.mask is None:
            return np.arange(len(node.producers))
        return np.flatnonzero(self.effective_binary(node.mask))

    # -- parameters --------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for role, t in self.stem.tensors.items():
            yield f"stem.{role}", t
        for name, block in self.blocks.items():
            for role, t in block.params.tensors.items():
                yield f"{name}.{role}", t
        for name, proj in self.projections.items():
            yield f"{name}.conv", proj.weight
        yield "head.weight", self.head_weight
        yield "head.bias", self.head_bias

    def trainable_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_parameters():
            if self.frozen_features and not name.startswith("head."):
                continue
            yield name, t

    def bn_states(self) -> Iterator[tuple[str, BatchNormState]]:
        for role, s in self.stem.bn.items():
            yield f"stem.{role}", s
        for name, block in self.blocks.items():
            for role, s in block.params.bn.items():
                yield f"{name}.{role}", s

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def effective_parameters(self) -> int:
        """Parameters on some active path to the output under the current (effective) masks."""
        live_blocks, live_nodes = live_elements(self)
        n = sum(t.size for name, t in self.named_parameters() if not _owned_by_block(name, self.blocks))
        n -= sum(p.weight.size for name, p in self.projections.items() if not any(self.nodes[x].projection == name for x in live_nodes))
        n += sum(self.blocks[b].params.num_parameters() for b in live_blocks)
        return n

    def active_blocks(self) -> int:
        return len(live_elements(self)[0])

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def astype(self, dtype) -> "ModuleGraph":
        self.stem.astype(dtype)
        for block in self.blocks.values():
            block.params.astype(dtype)
        T.parameters_as([p.weight for p in self.projections.values()] + [self.head_weight, self.head_bias], dtype)
        return self

    @property
    def dtype(self):
        return self.head_weight.dtype


def _owned_by_block(param_name: str, blocks: dict) -> bool:
    return param_name.rsplit(".", 1)[0] in blocks


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _stage_shape(arch: ArchSpec, stage: int) -> tuple[int, int, int]:
    size = arch.image_size // 2**stage
    return (arch.stage_channels[stage], size, size)


def _base_graph(arch: ArchSpec, rng: np.random.Generator) -> ModuleGraph:
    g = ModuleGraph(arch)
    stem = BlockParams(BlockSpec("basic", arch.in_channels, arch.stem_channels))
    fan_in = arch.in_channels * 9
    stem.tensors["conv1"] = Tensor((rng.standard_normal((arch.stem_channels, arch.in_channels, 3, 3)) * np.sqrt(2.0 / fan_in)).astype(T.DEFAULT_DTYPE), requires_grad=True)
    stem.tensors["bn1_scale"] = Tensor(np.ones(arch.stem_channels, dtype=T.DEFAULT_DTYPE), requires_grad=True)
    stem.tensors["bn1_shift"] = Tensor(np.zeros(arch.stem_channels, dtype=T.DEFAULT_DTYPE), requires_grad=True)
    stem.bn["bn1"] = BatchNormState.fresh(arch.stem_channels)
    g.stem = stem
    return g


def _add_head(g: ModuleGraph, channels: int, rng: np.random.Generator) -> None:
    k = g.arch.num_classes
    g.head_weight = Tensor((rng.standard_normal((k, channels)) / np.sqrt(channels)).astype(T.DEFAULT_DTYPE), requires_grad=True)
    g.head_bias = Tensor(np.zeros(k, dtype=T.DEFAULT_DTYPE), requires_grad=True)


def _make_mask(arch: ArchSpec, consumer: str, producers: list[str], prev_index: int, rng: np.random.Generator) -> MaskState:
    e = len(producers)
    mode = arch.connectivity
    if mode == "fixed_full":
        return MaskState(consumer, producers, e, binary=np.ones(e, dtype=np.int8), frozen=True)
    k = min(arch.fan_in, e)
    if mode == "fixed_prev":
        binary = np.zeros(e, dtype=np.int8)
        binary[prev_index] = 1
        return MaskState(consumer, producers, 1, binary=binary, frozen=True)
    if mode == "fixed_random":
        binary = np.zeros(e, dtype=np.int8)
        binary[rng.choice(e, size=k, replace=False)] = 1
        return MaskState(consumer, producers, k, binary=binary, frozen=True)
    return MaskState(consumer, producers, k)


def build_resnet_masked(arch: ArchSpec, seed: int = 0) -> ModuleGraph:
    """Residual-block stack where block j may read any earlier block."""
    if arch.family != "resnet":
        raise ConfigError(f"build_resnet_masked needs family 'resnet', got {arch.family!r}")
    rng = np.random.default_rng(seed)
    conn_rng = np.random.default_rng(arch.connectivity_seed)
    g = _base_graph(arch, rng)
    in_shape = (arch.stem_channels, arch.image_size, arch.image_size)
    for j, stage in enumerate(arch.module_stages, start=1):
        out_shape = _stage_shape(arch, stage)
        stride = in_shape[1] // out_shape[1]
        if arch.block_kind == "basic":
            spec = BlockSpec("basic", in_shape[0], out_shape[0], stride=stride)
            fwd = "basic"
        else:
            spec = BlockSpec("bottleneck", in_shape[0], out_shape[0], width=max(out_shape[0] // 4, 1), stride=stride)
            fwd = "bottleneck_block"
        node_id, block_id = f"in{j}", f"b{j}"
        if j == 1:
            node = Node(node_id, in_shape, identity=["stem"])
        else:
            producers = [f"b{k}" for k in range(1, j)]
            node = Node(node_id, in_shape, producers=producers, mask=_make_mask(arch, node_id, producers, j - 2, conn_rng))
        g.nodes[node_id] = node
        g.blocks[block_id] = Block(block_id, init_block(spec, rng), node_id, fwd)
        g._schedule += [("node", node_id), ("block", block_id)]
        g._block_ids.append(block_id)
        in_shape = out_shape
    g.nodes["out"] = Node("out", in_shape, producers=[f"b{arch.num_modules}"])
    g._schedule.append(("node", "out"))
    _add_head(g, in_shape[0], rng)
    return g


def build_resnext_masked(arch: ArchSpec, seed: int = 0) -> ModuleGraph:
    """Multi-branch stack where each branch picks its inputs among the previous module's branches."""
    if arch.family != "resnext":
        raise ConfigError(f"build_resnext_masked needs family 'resnext', got {arch.family!r}")
    rng = np.random.default_rng(seed)
    conn_rng = np.random.default_rng(arch.connectivity_seed)
    g = _base_graph(arch, rng)
    c = arch.cardinality
    in_shape = (arch.stem_channels, arch.image_size, arch.image_size)
    prev_proj: str | None = None
    for i, stage in enumerate(arch.module_stages, start=1):
        out_shape = _stage_shape(arch, stage)
        stride = in_shape[1] // out_shape[1]
        spec = BlockSpec("bottleneck", in_shape[0], out_shape[0], width=arch.bottleneck_width * 2**stage, stride=stride)
        for j in range(1, c + 1):
            node_id = f"m{i}.in{j}"
            if i == 1:
                node = Node(node_id, in_shape, identity=["stem"])
            else:
                producers = [f"m{i - 1}.b{k}" for k in range(1, c + 1)]
                node = Node(
                    node_id, in_shape, producers=producers,
                    mask=_make_mask(arch, node_id, producers, j - 1, conn_rng),
                    identity=[f"m{i - 1}.in{j}"], projection=prev_proj, relu=True,
                )
            g.nodes[node_id] = node
            g._schedule.append(("node", node_id))
        for j in range(1, c + 1):
            block_id = f"m{i}.b{j}"
            g.blocks[block_id] = Block(block_id, init_block(spec, rng), f"m{i}.in{j}", "branch")
            g._schedule.append(("block", block_id))
            g._block_ids.append(block_id)
        if in_shape != out_shape:
            prev_proj = f"m{i}.proj"
            w = rng.standard_normal((out_shape[0], in_shape[0], 1, 1)) * np.sqrt(2.0 / in_shape[0])
            g.projections[prev_proj] = Projection(Tensor(w.astype(T.DEFAULT_DTYPE), requires_grad=True), stride)
        else:
            prev_proj = None
        in_shape = out_shape
    last = arch.num_modules
    g.nodes["out"] = Node(
        "out", in_shape, producers=[f"m{last}.b{k}" for k in range(1, c + 1)],
        identity=[f"m{last}.in{j}" for j in range(1, c + 1)], projection=prev_proj, relu=True,
    )
    g._schedule.append(("node", "out"))
    _add_head(g, in_shape[0], rng)
    return g


def build_graph(arch: ArchSpec, seed: int = 0) -> ModuleGraph:
    return build_resnet_masked(arch, seed) if arch.family == "resnet" else build_resnext_masked(arch, seed)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    logits: Tensor
    loss: Tensor | None
    values: dict[str, Tensor]
    presums: dict[str, Tensor]
    binaries: dict[str, np.ndarray]


@dataclass
class GraphGradients:
    """Mask gradients for every candidate of every trainable mask; weight gradients live on the tensors."""

    masks: dict[str, np.ndarray]


def _identity_term(g: ModuleGraph, node: Node, values: dict[str, Tensor]) -> Tensor | None:
    if not node.identity:
        return None
    srcs = [values[s] for s in node.identity]
    ident = srcs[0] if len(srcs) == 1 else T.mean_tensors(srcs)
    if node.projection is not None:
        proj = g.projections[node.projection]
        ident = T.conv2d(ident, proj.weight, proj.stride, 0)
    elif tuple(ident.shape[1:]) != tuple(node.shape):
        ident = T.adapt(ident, node.shape)
    return ident


def graph_forward(
    g: ModuleGraph,
    batch,
    labels=None,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    sample: bool = True,
    mask_override: dict[str, np.ndarray] | None = None,
) -> ForwardResult:
    """Run the network on ``batch`` (N, C, H, W).

    In train mode trainable masks are re-sampled first (one sample per
    minibatch) when ``sample`` is set; otherwise their stored binary masks are
    used.  Eval mode uses frozen masks, or the current top-K for masks that
    are still trainable.  ``mask_override`` replaces a consumer's binary mask
    by real-valued weights on all candidates.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=g.dtype))
    expected = (g.arch.in_channels, g.arch.image_size, g.arch.image_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"expected a batch of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
    training = mode == "train"
    bn_train = training and not g.frozen_features
    mask_override = mask_override or {}

    binaries: dict[str, np.ndarray] = {}
    for name, mask in g.masks.items():
        if mask.frozen:
            binaries[name] = mask.binary
        elif training:
            if sample:
                if rng is None:
                    raise ValueError("a random generator is needed to sample trainable masks")
                sample_binary(mask, rng)
            binaries[name] = mask.binary
        else:
            binaries[name] = topk_binary(mask.real, mask.fan_in)

    stem = g.stem
    h = T.conv2d(x, stem.tensors["conv1"], 1, 1)
    h = T.batchnorm(h, stem.tensors["bn1_scale"], stem.tensors["bn1_shift"], stem.bn["bn1"], bn_train)
    values: dict[str, Tensor] = {"stem": T.relu(h)}
    presums: dict[str, Tensor] = {}

    for kind, name in g.schedule():
        if kind == "block":
            block = g.blocks[name]
            values[name] = _BLOCK_FORWARD[block.forward](values[block.input], block.params, bn_train)
            continue
        node = g.nodes[name]
        ident = _identity_term(g, node, values)
        if not node.producers:
            values[name] = ident
            continue
        outputs = [values.get(p) for p in node.producers]
        if name in mask_override:
            presum = weighted_aggregate(mask_override[name], outputs, node.shape, ident)
        else:
            binary = binaries[name] if node.mask is not None else np.ones(len(outputs), dtype=np.int8)
            active = np.flatnonzero(binary)
            terms = [] if ident is None else [ident]
            terms += [T.adapt(outputs[k], node.shape) for k in active]
            presum = T.sum_tensors(terms)
        if node.mask is not None and training and not node.mask.frozen:
            presums[name] = presum.retain_grad()
        values[name] = T.relu(presum) if node.relu else presum

    logits = T.linear(T.global_avg_pool(values[g.output_node]), g.head_weight, g.head_bias)
    loss = T.softmax_xent(logits, labels) if labels is not None else None
    return ForwardResult(logits, loss, values, presums, binaries)


def graph_backward(g: ModuleGraph, result: ForwardResult, loss_grad: float = 1.0) -> GraphGradients:
    """Reverse-mode pass: fills parameter gradients and returns mask gradients for all candidates."""
    if result.loss is None:
        raise ValueError("graph_backward needs a forward result computed with labels")
    g.zero_grad()
    result.loss.backward(np.asarray(loss_grad))
    masks: dict[str, np.ndarray] = {}
    adapted_cache: dict[tuple[str, tuple], np.ndarray] = {}
    for name, presum in result.presums.items():
        node = g.nodes[name]
        grad = presum.grad if presum.grad is not None else np.zeros(presum.shape, dtype=presum.dtype)
        out = np.zeros(len(node.producers))
        for k, producer in enumerate(node.producers):
            key = (producer, tuple(node.shape))
            if key not in adapted_cache:
                adapted_cache[key] = T.adapt_array(result.values[producer].data, node.shape)
            out[k] = mask_gradient(grad, adapted_cache[key])
        masks[name] = out
        presum.grad = None
    return GraphGradients(masks)


def predict_logits(g: ModuleGraph, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Eval-mode logits for a stack of images, in batches, without recording gradients."""
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(graph_forward(g, images[start : start + batch_size], mode="eval").logits.data)
    if not out:
        return np.zeros((0, g.arch.num_classes), dtype=np.float32)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(g: ModuleGraph, path, rng_state: dict | None = None, extra: dict | None = None) -> Path:
    """Versioned ``.npz`` dump: parameters, BN statistics, masks, RNG state and metadata."""
    path = Path(path)
    arrays = {f"param/{name}": t.data for name, t in g.named_parameters()}
    for name, state in g.bn_states():
        arrays[f"bn/{name}/mean"] = state.running_mean
        arrays[f"bn/{name}/var"] = state.running_var
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": g.arch.to_dict(),
        "masks": [m.to_dict() for m in g.masks.values()],
        "removed_blocks": list(g.removed_blocks),
        "present_nodes": list(g.nodes),
        "frozen_features": g.frozen_features,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[ModuleGraph, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
        arch = ArchSpec.from_dict(meta["arch"])
        g = build_graph(arch)
        for name in meta["removed_blocks"]:
            g.blocks.pop(name, None)
        present = set(meta["present_nodes"])
        for name in [n for n in g.nodes if n not in present]:
            del g.nodes[name]
        for name in [p for p in g.projections if not any(n.projection == p for n in g.nodes.values())]:
            del g.projections[name]
        g.removed_blocks = list(meta["removed_blocks"])
        for md in meta["masks"]:
            if md["consumer"] in g.nodes:
                g.nodes[md["consumer"]].mask = MaskState.from_dict(md)
        for name, t in g.named_parameters():
            t.data = np.array(data[f"param/{name}"])
        for name, state in g.bn_states():
            state.running_mean = np.array(data[f"bn/{name}/mean"])
            state.running_var = np.array(data[f"bn/{name}/var"])
        g.frozen_features = bool(meta.get("frozen_features", False))
    return g, meta
