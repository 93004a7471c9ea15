"""Connectivity masks: sampling, aggregation, mask gradients, freezing and pruning.

Each consumer (a block input) keeps a real-valued mask over its candidate
producers, clipped to [0, 1].  Before every training step the mask is
normalised into a multinomial and exactly ``fan_in`` distinct producers are
drawn; the consumer's input is the sum of the selected (shape-adapted)
producer outputs.  Because that sum is linear in the mask, the derivative of
the loss with respect to entry k is the inner product of the consumer-input
gradient with producer k's adapted output, for active and inactive k alike.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractViolation, ShapeError
from .tensor import Tensor

if TYPE_CHECKING:
    from .graph import ModuleGraph

logger = logging.getLogger(__name__)

MASK_INIT = 0.5


@dataclass
class MaskState:
    """Real-valued and binary connectivity mask of one consumer."""

    consumer: str
    producers: list[str]
    fan_in: int
    real: np.ndarray = None
    binary: np.ndarray = None
    frozen: bool = False

    def __post_init__(self):
        e = len(self.producers)
        if e < 1:
            raise ValueError(f"mask for {self.consumer!r} needs at least one candidate producer")
        if not 1 <= self.fan_in <= e:
            raise ValueError(f"fan-in must satisfy 1 <= K <= {e} for {self.consumer!r}, got {self.fan_in}")
        if self.real is None:
            self.real = np.full(e, MASK_INIT)
        self.real = np.asarray(self.real, dtype=np.float64)
        if self.binary is None:
            self.binary = np.zeros(e, dtype=np.int8)
            self.binary[:self.fan_in] = 1
        self.binary = np.asarray(self.binary, dtype=np.int8)
        if self.real.shape != (e,) or self.binary.shape != (e,):
            raise ShapeError(f"mask arrays must have length {e} for {self.consumer!r}")

    @property
    def size(self) -> int:
        return len(self.producers)

    def active(self) -> np.ndarray:
        return np.flatnonzero(self.binary)

    def to_dict(self) -> dict:
        return {
            "consumer": self.consumer,
            "producers": list(self.producers),
            "fan_in": int(self.fan_in),
            "real": [float(v) for v in self.real],
            "binary": [int(v) for v in self.binary],
            "frozen": bool(self.frozen),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskState":
        return cls(d["consumer"], list(d["producers"]), int(d["fan_in"]), np.array(d["real"]), np.array(d["binary"]), bool(d["frozen"]))


def normalize(mask: MaskState) -> np.ndarray:
    """Probability vector proportional to the real-valued mask (the mask itself is left untouched)."""
    total = float(mask.real.sum())
    if not total > 0:
        logger.warning("degenerate mask for %s (all entries zero); sampling uniformly", mask.consumer)
        return np.full(mask.size, 1.0 / mask.size)
    return mask.real / total


def sample_binary(mask: MaskState, rng: np.random.Generator) -> np.ndarray:
    """Draw ``fan_in`` distinct producers, one at a time, renormalising after each draw.

    If fewer than ``fan_in`` producers have non-zero probability all of them
    are taken and the remainder is filled uniformly from the zero-probability
    producers.
    """
    k = mask.fan_in
    if k == mask.size:
        mask.binary = np.ones(k, dtype=np.int8)
        return mask.binary
    p = normalize(mask).copy()
    chosen = np.zeros(mask.size, dtype=np.int8)
    support = int(np.count_nonzero(p > 0))
    if support < k:
        logger.warning("mask for %s has %d non-zero entries but fan-in %d; filling uniformly", mask.consumer, support, k)
        chosen[p > 0] = 1
        rest = np.flatnonzero(p <= 0)
        chosen[rng.choice(rest, size=k - support, replace=False)] = 1
    else:
        for _ in range(k):
            cdf = np.cumsum(p)
            u = rng.random() * cdf[-1]
            a = int(np.searchsorted(cdf, u, side="right"))
            a = min(a, mask.size - 1)
            while p[a] <= 0:  # u landed on the closed right end of the cdf
                a -= 1
            chosen[a] = 1
            p[a] = 0.0
    mask.binary = chosen
    return chosen


def aggregate(
    binary_mask: Sequence[int],
    producer_outputs: Sequence[Tensor],
    target_shape: Sequence[int] | None = None,
    identity: Tensor | None = None,
) -> Tensor:
    """Sum of the active producer outputs after adapting each to ``target_shape``.

    ``identity`` (if given) is an always-active term placed first in the sum.
    """
    binary_mask = np.asarray(binary_mask)
    if binary_mask.shape != (len(producer_outputs),):
        raise ShapeError(f"mask of length {binary_mask.size} for {len(producer_outputs)} producers")
    terms = [] if identity is None else [identity]
    for k in np.flatnonzero(binary_mask):
        y = producer_outputs[k]
        terms.append(y if target_shape is None else T.adapt(y, target_shape))
    if not terms:
        raise ContractViolation("aggregation with no active input")
    return terms[0] if len(terms) == 1 else T.sum_tensors(terms)


def weighted_aggregate(
    weights: Sequence[float],
    producer_outputs: Sequence[Tensor],
    target_shape: Sequence[int] | None = None,
    identity: Tensor | None = None,
) -> Tensor:
    """Relaxed aggregation with real-valued weights on every producer (used to check mask gradients)."""
    terms = [] if identity is None else [identity]
    for wk, y in zip(weights, producer_outputs):
        y = y if target_shape is None else T.adapt(y, target_shape)
        terms.append(T.scale(y, float(wk)))
    return T.sum_tensors(terms)


def mask_gradient(consumer_grad, adapted_output) -> float:
    """d loss / d m_{j,k}: inner product of the consumer-input gradient and the adapted producer output."""
    g = consumer_grad.data if isinstance(consumer_grad, Tensor) else np.asarray(consumer_grad)
    y = adapted_output.data if isinstance(adapted_output, Tensor) else np.asarray(adapted_output)
    if g.shape != y.shape:
        raise ShapeError(f"mask_gradient operands differ in shape: {g.shape} vs {y.shape}")
    if g.dtype == np.float64 or g.ndim < 2:
        return float(np.dot(g.reshape(-1).astype(np.float64), y.reshape(-1).astype(np.float64)))
    # per-sample products in the working precision, summed across samples in float64
    n = g.shape[0]
    return float((g.reshape(n, 1, -1) @ y.reshape(n, -1, 1)).sum(dtype=np.float64))


def update_masks(mask: MaskState, grads: Sequence[float], lr_mask: float) -> MaskState:
    """Clipped gradient step on the real-valued mask; non-finite gradients skip the step."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != mask.real.shape:
        raise ShapeError(f"mask gradient shape {grads.shape} does not match mask {mask.real.shape}")
    if mask.frozen:
        return mask
    if not np.all(np.isfinite(grads)):
        logger.error("non-finite mask gradient for %s; keeping previous mask", mask.consumer)
        return mask
    mask.real = np.clip(mask.real - lr_mask * grads, 0.0, 1.0)
    return mask


def topk_binary(real: np.ndarray, k: int) -> np.ndarray:
    """Indicator of the k largest entries; ties go to the lowest index."""
    order = np.argsort(-np.asarray(real), kind="stable")
    out = np.zeros(len(real), dtype=np.int8)
    out[order[:k]] = 1
    return out


def freeze_topk(mask: MaskState) -> MaskState:
    mask.binary = topk_binary(mask.real, mask.fan_in)
    mask.frozen = True
    return mask


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------


@dataclass
class PruneReport:
    removed_blocks: list[str] = field(default_factory=list)
    params_before: int = 0
    params_after: int = 0

    @property
    def saving(self) -> float:
        return 1.0 - self.params_after / self.params_before if self.params_before else 0.0

    def to_dict(self) -> dict:
        return {
            "removed_blocks": list(self.removed_blocks),
            "params_before": int(self.params_before),
            "params_after": int(self.params_after),
            "saving": round(self.saving, 6),
        }


def live_elements(graph: "ModuleGraph") -> tuple[set[str], set[str]]:
    """Blocks and aggregation nodes on some active path to the output.

    Walks backwards from the output node: a live node makes its active
    producers and identity sources live, a live block makes its input node live.
    """
    live_blocks: set[str] = set()
    live_nodes: set[str] = {graph.output_node}
    for kind, name in reversed(graph.schedule()):
        if kind == "block":
            if name in live_blocks:
                live_nodes.add(graph.blocks[name].input)
            continue
        if name not in live_nodes:
            continue
        node = graph.nodes[name]
        for k in graph.active_producers(node):
            live_blocks.add(node.producers[k])
        live_nodes.update(src for src in node.identity if src != "stem")
    return live_blocks, live_nodes


def prune_unused(graph: "ModuleGraph") -> tuple["ModuleGraph", PruneReport]:
    """Copy of ``graph`` without blocks that cannot reach the output; the network function is unchanged."""
    for mask in graph.masks.values():
        if not mask.frozen:
            raise ContractViolation(f"prune_unused needs frozen masks; {mask.consumer} is still trainable")
    pruned = copy.deepcopy(graph)
    live_blocks, live_nodes = live_elements(pruned)
    if pruned.output_node not in live_nodes:
        raise ContractViolation("output node would be pruned")
    removed = [b for b in pruned.blocks if b not in live_blocks]
    report = PruneReport(removed_blocks=removed, params_before=graph.num_parameters())
    for b in removed:
        del pruned.blocks[b]
    for n in [n for n in pruned.nodes if n not in live_nodes]:
        del pruned.nodes[n]
    for proj in [p for p in pruned.projections if not any(node.projection == p for node in pruned.nodes.values())]:
        del pruned.projections[proj]
    pruned.removed_blocks = sorted(set(pruned.removed_blocks) | set(removed), key=graph.block_order)
    report.params_after = pruned.num_parameters()
    return pruned, report


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def connectivity_records(graph: "ModuleGraph") -> list[dict]:
    records = []
    for name, node in graph.nodes.items():
        if node.mask is None:
            continue
        mask = node.mask
        binary = graph.effective_binary(mask)
        records.append(
            {
                "consumer": name,
                "producers": list(mask.producers),
                "real_mask": [round(float(v), 8) for v in mask.real],
                "binary_mask": [int(v) for v in binary],
                "fan_in": int(mask.fan_in),
                "frozen": bool(mask.frozen),
            }
        )
    return records


def to_json(graph: "ModuleGraph") -> str:
    return json.dumps({"arch": graph.arch.to_dict(), "connections": connectivity_records(graph)}, indent=2)


def to_dot(graph: "ModuleGraph") -> str:
    """Graphviz rendering: blocks as boxes (pruned ones greyed out), active connections as edges."""
    live_blocks, _ = live_elements(graph) if all(m.frozen for m in graph.masks.values()) else (set(graph.blocks), None)
    lines = ["digraph connectivity {", "  rankdir=TB;", '  node [shape=box, style=filled, fillcolor="#8fd18f"];']
    lines.append('  stem [shape=ellipse, fillcolor="#dddddd"];')
    lines.append('  output [shape=ellipse, fillcolor="#dddddd"];')
    for name in graph.all_block_ids():
        if name in graph.blocks and name in live_blocks:
            lines.append(f'  "{name}";')
        else:
            lines.append(f'  "{name}" [fillcolor="#f2f2f2", fontcolor="#999999"];')
    for name, block in graph.blocks.items():
        node = graph.nodes[block.input]
        for src in _sources(graph, node):
            lines.append(f'  "{src}" -> "{name}";')
    out = graph.nodes[graph.output_node]
    for src in _sources(graph, out):
        lines.append(f'  "{src}" -> output;')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _sources(graph: "ModuleGraph", node) -> list[str]:
    if not node.producers:
        return ["stem"] if "stem" in node.identity else []
    return [node.producers[k] for k in graph.active_producers(node)]
