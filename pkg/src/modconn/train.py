"""SGD with momentum, the four-phase mask/weight protocol and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .connectivity import freeze_topk, update_masks
from .data import Dataset, augment
from .errors import ConfigError, NumericError
from .graph import ModuleGraph, graph_backward, graph_forward, predict_logits, save_checkpoint

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "phase", "epoch", "split", "loss", "top1", "lr_weights", "lr_masks",
    "active_blocks", "params_effective", "wall_seconds",
)


@dataclass(frozen=True)
class Phase:
    epochs: int
    lr_weights: float
    lr_masks: float = 0.0
    masks_trainable: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.lr_weights < 0 or self.lr_masks < 0:
            raise ConfigError(f"phase epochs and learning rates must be >= 0: {self}")


@dataclass(frozen=True)
class PhaseSchedule:
    """Ordered training phases.  Only the first may train masks; they are frozen when it ends."""

    phases: tuple[Phase, ...]

    def __post_init__(self):
        if not self.phases:
            raise ConfigError("a schedule needs at least one phase")
        for i, p in enumerate(self.phases[1:], start=2):
            if p.masks_trainable or p.lr_masks:
                raise ConfigError(f"phase {i} trains masks; only phase 1 may")

    @classmethod
    def four_phase(cls, epochs, lr_weights, lr_masks: float) -> "PhaseSchedule":
        if len(epochs) != 4 or len(lr_weights) != 4:
            raise ConfigError("the four-phase protocol needs four epoch counts and four weight learning rates")
        phases = [Phase(int(epochs[0]), float(lr_weights[0]), float(lr_masks), True)]
        phases += [Phase(int(e), float(lr)) for e, lr in zip(epochs[1:], lr_weights[1:])]
        return cls(tuple(phases))

    @classmethod
    def cifar_resnext(cls) -> "PhaseSchedule":
        return cls.four_phase((120, 100, 50, 50), (0.1, 0.1, 0.01, 0.001), 0.2)

    @classmethod
    def cifar_resnet(cls) -> "PhaseSchedule":
        return cls.four_phase((30, 30, 10, 10), (0.1, 0.1, 0.01, 0.001), 0.3)

    @classmethod
    def desk(cls, family: str = "resnext", epochs=(12, 10, 5, 5)) -> "PhaseSchedule":
        """Desk-scale schedule: the full protocol's learning rates with fewer epochs."""
        lr_masks = 0.2 if family == "resnext" else 0.3
        return cls.four_phase(epochs, (0.1, 0.1, 0.01, 0.001), lr_masks)

    def with_epochs(self, epochs: Iterable[int]) -> "PhaseSchedule":
        epochs = list(epochs)
        if len(epochs) != len(self.phases):
            raise ConfigError(f"expected {len(self.phases)} epoch counts, got {len(epochs)}")
        return PhaseSchedule(tuple(replace(p, epochs=int(e)) for p, e in zip(self.phases, epochs)))

    @property
    def total_epochs(self) -> int:
        return sum(p.epochs for p in self.phases)


@dataclass
class TrainConfig:
    schedule: PhaseSchedule = field(default_factory=PhaseSchedule.desk)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0
    augment: bool = True
    timing: bool = False
    eval_batch_size: int = 100
    snapshot_dir: str | None = None

    def __post_init__(self):
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight decay must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs two samples)")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def decays(name: str) -> bool:
    """Weight decay applies to conv filters and the linear layer's weights only."""
    role = name.rsplit(".", 1)[-1]
    return role.startswith("conv") or name == "head.weight"


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float, weight_decay: float = 0.0):
    """In-place update: v <- momentum * v + grad + wd * param; param <- param - lr * v."""
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity
    return param, velocity


class SGD:
    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in self.params}

    def step(self, lr: float) -> None:
        for name, t in self.params:
            if t.grad is None:
                continue
            wd = self.weight_decay if decays(name) else 0.0
            sgd_step(t.data, t.grad.astype(t.dtype, copy=False), self.velocity[name], lr, self.momentum, wd)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    loss: float
    top1: float


def accuracy(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _xent(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def evaluate(graph: ModuleGraph, dataset: Dataset, batch_size: int = 100) -> EvalResult:
    """Eval-mode cross-entropy and top-1 accuracy (frozen masks, or the current top-K)."""
    logits = predict_logits(graph, dataset.images, batch_size)
    if len(dataset) == 0:
        return EvalResult(float("nan"), 0.0)
    return EvalResult(_xent(logits, dataset.labels), accuracy(logits, dataset.labels))


@dataclass
class TrainResult:
    graph: ModuleGraph
    rows: list[dict]

    def csv(self) -> str:
        return metrics_csv(self.rows)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in METRIC_COLUMNS})
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) >= 2:  # a single leftover sample cannot be batch-normalised
            yield idx


def freeze_all(graph: ModuleGraph) -> None:
    for mask in graph.masks.values():
        if not mask.frozen:
            freeze_topk(mask)


def run_phases(
    graph: ModuleGraph,
    train: Dataset,
    cfg: TrainConfig,
    eval_data: Dataset | None = None,
    metrics_path=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train ``graph`` in place through every phase of ``cfg.schedule``.

    During phase 1 trainable masks are re-sampled for every minibatch and
    updated with their own learning rate; at the end of phase 1 every mask is
    frozen to its top-K entries and the remaining phases fine-tune the weights
    only.  One CSV row per epoch and split is produced.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(graph.trainable_parameters(), cfg.momentum, cfg.weight_decay)
    rows: list[dict] = []
    start = time.perf_counter()
    for p_idx, phase in enumerate(cfg.schedule.phases, start=1):
        if p_idx == 2:
            freeze_all(graph)
        train_masks = phase.masks_trainable and bool(graph.learned_masks())
        lr_m = phase.lr_masks if train_masks else 0.0
        for epoch in range(1, phase.epochs + 1):
            loss_sum, correct, seen = 0.0, 0, 0
            for step, idx in enumerate(_batches(len(train), cfg.batch_size, rng)):
                x = train.images[idx]
                if cfg.augment:
                    x = augment(x, rng)
                y = train.labels[idx]
                result = graph_forward(graph, x, y, mode="train", rng=rng, sample=train_masks)
                loss = result.loss.item()
                if not np.isfinite(loss):
                    _abort(graph, cfg, p_idx, epoch, step, loss)
                grads = graph_backward(graph, result)
                opt.step(phase.lr_weights)
                if train_masks:
                    for name, g in grads.masks.items():
                        update_masks(graph.masks[name], g, lr_m)
                loss_sum += loss * len(idx)
                correct += int(np.sum(np.argmax(result.logits.data, axis=1) == y))
                seen += len(idx)
            common = {
                "phase": p_idx,
                "epoch": epoch,
                "lr_weights": phase.lr_weights,
                "lr_masks": lr_m,
                "active_blocks": graph.active_blocks(),
                "params_effective": graph.effective_parameters(),
            }
            wall = time.perf_counter() - start if cfg.timing else 0.0
            epoch_rows = [dict(common, split="train", loss=loss_sum / max(seen, 1), top1=correct / max(seen, 1), wall_seconds=wall)]
            if eval_data is not None:
                ev = evaluate(graph, eval_data, cfg.eval_batch_size)
                epoch_rows.append(dict(common, split="test", loss=ev.loss, top1=ev.top1, wall_seconds=wall))
            for row in epoch_rows:
                logger.info("phase %d epoch %d %s loss %.4f top1 %.4f", p_idx, epoch, row["split"], row["loss"], row["top1"])
                if on_epoch:
                    on_epoch(row)
            rows += epoch_rows
    if len(cfg.schedule.phases) == 1:
        freeze_all(graph)
    if metrics_path is not None:
        Path(metrics_path).write_text(metrics_csv(rows))
    return TrainResult(graph, rows)


def _abort(graph: ModuleGraph, cfg: TrainConfig, phase: int, epoch: int, step: int, loss: float) -> None:
    where = f"phase {phase}, epoch {epoch}, step {step}"
    snapshot = None
    if cfg.snapshot_dir is not None:
        snapshot = save_checkpoint(graph, Path(cfg.snapshot_dir) / "nan_snapshot.npz", extra={"where": where, "loss": repr(loss)})
    masks = {name: m.real.round(4).tolist() for name, m in graph.masks.items() if not m.frozen}
    raise NumericError(f"non-finite loss {loss} at {where}; trainable masks {masks}" + (f"; snapshot written to {snapshot}" if snapshot else ""))
