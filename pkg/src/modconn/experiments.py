"""Experiment drivers: config files, the planted-connectivity task, fan-in sweeps and baseline comparisons."""

from __future__ import annotations

import configparser
import copy
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import connectivity as conn
from .connectivity import MaskState
from .data import Dataset, load_cifar_splits, make_blobs
from .errors import ConfigError
from .graph import ArchSpec, ModuleGraph, build_graph, graph_forward, predict_logits, save_checkpoint
from .train import Phase, PhaseSchedule, TrainConfig, evaluate, metrics_csv, run_phases

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


_ARCH_KEYS = {
    "family": str, "num_modules": int, "fan_in": int, "cardinality": int, "bottleneck_width": int,
    "connectivity": str, "connectivity_seed": int, "block_kind": str, "stem_channels": int,
    "stage_channels": _ints, "module_stages": _ints,
}
_OTHER_KEYS = {
    "depth": int, "dataset": str, "data_path": str, "subset_size": int, "epochs": _ints,
    "lr_weights": _floats, "lr_masks": float, "momentum": float, "weight_decay": float,
    "batch_size": int, "seed": int, "augment": _bool, "prune": _bool, "out": str,
    "synthetic_size": int, "timing": _bool,
}


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one training run."""

    arch: dict = field(default_factory=lambda: {"family": "resnext", "num_modules": 3, "cardinality": 8, "bottleneck_width": 2, "fan_in": 4})
    depth: int | None = None
    dataset: str = "cifar10"
    data_path: str = "data/cifar-10-batches-bin"
    subset_size: int | None = 5000
    synthetic_size: int = 512
    epochs: tuple[int, ...] = (12, 10, 5, 5)
    lr_weights: tuple[float, ...] = (0.1, 0.1, 0.01, 0.001)
    lr_masks: float | None = None
    momentum: float = 0.9
    weight_decay: float | None = None
    batch_size: int = 128
    seed: int = 0
    augment: bool = True
    prune: bool = False
    timing: bool = False
    out: str = "runs/default"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string("[experiment]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg = cls(arch={})
        for key, raw in parser["experiment"].items():
            try:
                if key in _ARCH_KEYS:
                    cfg.arch[key] = _ARCH_KEYS[key](raw)
                elif key in _OTHER_KEYS:
                    setattr(cfg, key, _OTHER_KEYS[key](raw))
                else:
                    raise ConfigError(f"unknown config key {key!r}")
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
        cfg.arch.setdefault("family", "resnext")
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    @property
    def family(self) -> str:
        return self.arch.get("family", "resnext")

    def arch_spec(self, num_classes: int, image_size: int = 32, in_channels: int = 3) -> ArchSpec:
        kw = dict(self.arch)
        kw.update(num_classes=num_classes, image_size=image_size, in_channels=in_channels)
        if self.depth is not None:
            family = kw.pop("family")
            kw.pop("num_modules", None)
            return ArchSpec.from_depth(family, self.depth, **kw)
        return ArchSpec(**kw)

    def schedule(self) -> PhaseSchedule:
        lr_masks = self.lr_masks if self.lr_masks is not None else (0.2 if self.family == "resnext" else 0.3)
        return PhaseSchedule.four_phase(self.epochs, self.lr_weights, lr_masks)

    def train_config(self) -> TrainConfig:
        wd = self.weight_decay if self.weight_decay is not None else (5e-4 if self.family == "resnext" else 1e-4)
        return TrainConfig(self.schedule(), self.momentum, wd, self.batch_size, self.seed, self.augment, self.timing)

    def load_data(self) -> tuple[Dataset, Dataset]:
        if self.dataset in ("cifar10", "cifar100"):
            return load_cifar_splits(self.data_path, self.dataset, self.subset_size)
        if self.dataset == "blobs":
            n = self.synthetic_size
            return make_blobs(n, seed=self.seed, split="train"), make_blobs(n, seed=self.seed, split="test")
        raise ConfigError(f"unknown dataset {self.dataset!r}; expected cifar10, cifar100 or blobs")

    def validate(self) -> ArchSpec:
        """Check the architecture and schedule before any data is read."""
        num_classes = {"cifar10": 10, "cifar100": 100, "blobs": 4}.get(self.dataset)
        if num_classes is None:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        image_size = 8 if self.dataset == "blobs" else 32
        spec = self.arch_spec(num_classes, image_size)
        self.train_config()
        return spec


@dataclass
class RunOutput:
    graph: ModuleGraph
    rows: list[dict]
    test: float
    report: conn.PruneReport | None = None


def run_experiment(cfg: ExperimentConfig, out_dir=None, seed: int | None = None) -> RunOutput:
    """Train from a config, writing checkpoint, metrics CSV and connectivity JSON/DOT to ``out_dir``."""
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    train, test = cfg.load_data()
    spec = cfg.arch_spec(train.num_classes, train.images.shape[-1], train.images.shape[1])
    graph = build_graph(spec, seed=cfg.seed)
    result = run_phases(graph, train, cfg.train_config(), eval_data=test)
    graph, report = result.graph, None
    if cfg.prune:
        graph, report = conn.prune_unused(graph)
    top1 = evaluate(graph, test).top1
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(result.rows))
        save_checkpoint(graph, out / "checkpoint.npz", extra={
            "seed": cfg.seed, "dataset": cfg.dataset, "data_path": cfg.data_path,
            "subset_size": cfg.subset_size, "synthetic_size": cfg.synthetic_size,
        })
        (out / "connectivity.json").write_text(conn.to_json(graph))
        (out / "connectivity.dot").write_text(conn.to_dot(graph))
        if report is not None:
            (out / "prune_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return RunOutput(graph, result.rows, top1, report)


# ---------------------------------------------------------------------------
# planted connectivity
# ---------------------------------------------------------------------------

PLANTED_ARCH = dict(
    family="resnet", num_modules=3, fan_in=1, num_classes=4, stage_channels=(8,),
    image_size=8, stem_channels=8, connectivity="learned",
)


@dataclass
class PlantedTask:
    """Labels produced by a frozen teacher graph whose connectivity is known."""

    train: Dataset
    val: Dataset
    teacher: ModuleGraph
    planted: dict[str, np.ndarray]


def _calibrate_bn(graph: ModuleGraph, images: np.ndarray) -> None:
    """Set every BN layer's running statistics to the batch statistics of ``images``."""
    states = [s for _, s in graph.bn_states()]
    saved = [s.momentum for s in states]
    for s in states:
        s.momentum = 0.0
    graph_forward(graph, images, mode="train", sample=False)
    for s, m in zip(states, saved):
        s.momentum = m


def _fresh_masks(graph: ModuleGraph) -> None:
    for node in graph.nodes.values():
        if node.mask is not None:
            node.mask = MaskState(node.id, list(node.mask.producers), node.mask.fan_in)


def make_planted_task(seed: int = 0, n_train: int = 512, n_val: int = 512, label_noise: float = 0.0) -> PlantedTask:
    """3-block task whose labels come from a teacher with a randomly planted connection.

    The teacher is a randomly initialised 3-block masked ResNet with batch
    norm calibrated on the inputs; block 3 reads either block 1 or block 2
    (chosen at random), and labels are the argmax of its centred linear head.
    """
    rng = np.random.default_rng([seed, 7])
    spec = ArchSpec(**PLANTED_ARCH)
    teacher = build_graph(spec, seed=seed)
    planted = {}
    for name, mask in teacher.masks.items():
        binary = np.zeros(mask.size, dtype=np.int8)
        binary[rng.choice(mask.size, size=mask.fan_in, replace=False)] = 1
        mask.binary, mask.frozen = binary, True
        planted[name] = binary.copy()
    shape = (spec.in_channels, spec.image_size, spec.image_size)
    x_train = rng.standard_normal((n_train, *shape)).astype(np.float32)
    x_val = rng.standard_normal((n_val, *shape)).astype(np.float32)
    _calibrate_bn(teacher, x_train)
    teacher.head_weight.data = teacher.head_weight.data * 4.0
    # centre the logits so no class dominates the labels
    teacher.head_bias.data = teacher.head_bias.data - predict_logits(teacher, x_train).mean(axis=0)
    y = [np.argmax(predict_logits(teacher, x), axis=1) for x in (x_train, x_val)]
    if label_noise:
        for labels in y:
            flip = rng.random(len(labels)) < label_noise
            labels[flip] = rng.integers(0, spec.num_classes, size=int(flip.sum()))
    train = Dataset(x_train, y[0], "train", None, spec.num_classes)
    val = Dataset(x_val, y[1], "val", None, spec.num_classes)
    return PlantedTask(train, val, teacher, planted)


def planted_student(task: PlantedTask, seed: int) -> ModuleGraph:
    """Teacher features (frozen), a fresh head and fresh trainable masks."""
    student = copy.deepcopy(task.teacher)
    rng = np.random.default_rng([seed, 11])
    student.head_weight.data = (rng.standard_normal(student.head_weight.shape) / np.sqrt(student.head_weight.shape[1])).astype(student.dtype)
    student.head_bias.data = np.zeros_like(student.head_bias.data)
    _fresh_masks(student)
    student.frozen_features = True
    return student


def planted_config(seed: int) -> TrainConfig:
    schedule = PhaseSchedule((Phase(8, 0.1, 0.05, True), Phase(4, 0.1), Phase(2, 0.01)))
    return TrainConfig(schedule, momentum=0.9, weight_decay=0.0, batch_size=64, seed=seed, augment=False)


def enumerate_configurations(graph: ModuleGraph) -> list[dict[str, np.ndarray]]:
    """Every assignment of a K-subset to every trainable mask."""
    masks = graph.learned_masks()
    choices = []
    for m in masks:
        options = []
        for subset in itertools.combinations(range(m.size), m.fan_in):
            b = np.zeros(m.size, dtype=np.int8)
            b[list(subset)] = 1
            options.append(b)
        choices.append(options)
    return [dict(zip([m.consumer for m in masks], combo)) for combo in itertools.product(*choices)]


def _fix_masks(graph: ModuleGraph, config: dict[str, np.ndarray]) -> None:
    for name, binary in config.items():
        mask = graph.masks[name]
        mask.binary, mask.frozen = binary.copy(), True


@dataclass
class PlantedOutcome:
    seed: int
    learned: dict[str, list[int]]
    oracle: dict[str, list[int]]
    oracle_losses: list[float]
    planted: dict[str, list[int]]

    @property
    def recovered(self) -> bool:
        return self.learned == self.oracle


def oracle_search(task: PlantedTask, seed: int) -> tuple[dict[str, np.ndarray], list[float]]:
    """Train the student head once per connectivity configuration; best by validation loss (ties: first)."""
    base = planted_student(task, seed)
    configs = enumerate_configurations(base)
    losses = []
    for config in configs:
        g = copy.deepcopy(base)
        _fix_masks(g, config)
        run_phases(g, task.train, planted_config(seed))
        losses.append(evaluate(g, task.val).loss)
    best = int(np.argmin(losses))
    return configs[best], losses


def planted_recovery(seed: int, task_seed: int | None = None) -> PlantedOutcome:
    """Learn masks on the planted task and compare the frozen choice with the enumeration oracle."""
    task = make_planted_task(seed if task_seed is None else task_seed)
    student = planted_student(task, seed)
    run_phases(student, task.train, planted_config(seed))
    learned = {name: student.masks[name].binary.tolist() for name in student.masks if name in task.planted}
    oracle, losses = oracle_search(task, seed)
    return PlantedOutcome(
        seed,
        learned={k: v for k, v in learned.items() if k in oracle},
        oracle={k: v.tolist() for k, v in oracle.items()},
        oracle_losses=losses,
        planted={k: v.tolist() for k, v in task.planted.items() if k in oracle},
    )


# ---------------------------------------------------------------------------
# fan-in sweeps and baseline comparisons
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("fan_in", "connectivity", "seed", "top1", "params", "params_effective")


def sweep_k(cfg: ExperimentConfig, ks, seed: int | None = None, data: tuple[Dataset, Dataset] | None = None) -> list[dict]:
    """Train one learned-connectivity model per fan-in and report test accuracy and parameter counts."""
    seed = cfg.seed if seed is None else seed
    train, test = data if data is not None else cfg.load_data()
    rows = []
    for k in ks:
        arch = dict(cfg.arch, fan_in=int(k))
        run_cfg = _with(cfg, arch=arch, seed=seed)
        spec = run_cfg.arch_spec(train.num_classes, train.images.shape[-1], train.images.shape[1])
        graph = build_graph(spec, seed=seed)
        params = graph.num_parameters()
        run_phases(graph, train, run_cfg.train_config())
        rows.append({
            "fan_in": int(k), "connectivity": spec.connectivity, "seed": seed,
            "top1": evaluate(graph, test).top1, "params": params,
            "params_effective": graph.effective_parameters(),
        })
    return rows


def _with(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    new = copy.deepcopy(cfg)
    for k, v in changes.items():
        setattr(new, k, v)
    return new


def rows_csv(rows: list[dict], columns=SWEEP_COLUMNS) -> str:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in columns))
    return "\n".join(lines) + "\n"


DIRECTIONAL_VARIANTS = {
    "learned_k4": {"connectivity": "learned", "fan_in": 4},
    "fixed_random_k4": {"connectivity": "fixed_random", "fan_in": 4},
    "fixed_full": {"connectivity": "fixed_full", "fan_in": 8},
    "learned_k1": {"connectivity": "learned", "fan_in": 1},
}


def directional_config(data_path, epochs=(12, 10, 5, 5)) -> ExperimentConfig:
    """Small multi-branch net (3 modules, cardinality 8, width 2) on a 5,000-image CIFAR-10 subset."""
    return ExperimentConfig(
        arch={"family": "resnext", "num_modules": 3, "cardinality": 8, "bottleneck_width": 2, "fan_in": 4},
        dataset="cifar10", data_path=str(data_path), subset_size=5000, epochs=tuple(epochs),
    )


def run_directional(base: ExperimentConfig, seeds=(0, 1, 2), variants=DIRECTIONAL_VARIANTS, out_dir=None) -> dict[str, list[RunOutput]]:
    """Train every variant for every seed; with ``out_dir`` each run's artefacts go to ``out_dir/variant/seed``."""
    results: dict[str, list[RunOutput]] = {}
    for name, overrides in variants.items():
        for seed in seeds:
            cfg = _with(base, arch=dict(base.arch, connectivity_seed=seed, **overrides), seed=seed, prune=overrides["connectivity"] == "learned")
            target = None if out_dir is None else Path(out_dir) / name / str(seed)
            results.setdefault(name, []).append(run_experiment(cfg, target))
    return results
