"""scikit-learn compatible classifier wrapping a masked module graph."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from . import connectivity as conn
from ._validation import check_images
from .data import Dataset
from .graph import ArchSpec, build_graph, predict_logits
from .train import PhaseSchedule, TrainConfig, run_phases


class ConnectivityClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier whose inter-module connections are learned together with its weights.

    ``X`` is a float array of shape (n_samples, channels, size, size).
    Training follows the four-phase protocol: masks and weights jointly,
    then three weight-only phases with the masks frozen to their top-K.
    """

    def __init__(
        self,
        family: str = "resnext",
        num_modules: int = 3,
        fan_in: int = 1,
        cardinality: int = 4,
        bottleneck_width: int = 2,
        connectivity: str = "learned",
        stage_channels=None,
        stem_channels: int = 16,
        epochs=(12, 10, 5, 5),
        lr_weights=(0.1, 0.1, 0.01, 0.001),
        lr_masks: float = 0.2,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        batch_size: int = 128,
        augment: bool = False,
        random_state: int = 0,
    ):
        self.family = family
        self.num_modules = num_modules
        self.fan_in = fan_in
        self.cardinality = cardinality
        self.bottleneck_width = bottleneck_width
        self.connectivity = connectivity
        self.stage_channels = stage_channels
        self.stem_channels = stem_channels
        self.epochs = epochs
        self.lr_weights = lr_weights
        self.lr_masks = lr_masks
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.augment = augment
        self.random_state = random_state

    def _arch(self, X: np.ndarray) -> ArchSpec:
        return ArchSpec(
            family=self.family, num_modules=self.num_modules, fan_in=self.fan_in,
            cardinality=self.cardinality, bottleneck_width=self.bottleneck_width,
            num_classes=max(len(self.classes_), 2), connectivity=self.connectivity,
            connectivity_seed=self.random_state, stem_channels=self.stem_channels,
            stage_channels=self.stage_channels, image_size=X.shape[2], in_channels=X.shape[1],
        )

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.graph_ = build_graph(self._arch(X), seed=self.random_state)
        cfg = TrainConfig(
            PhaseSchedule.four_phase(self.epochs, self.lr_weights, self.lr_masks),
            self.momentum, self.weight_decay, self.batch_size, self.random_state, self.augment,
        )
        data = Dataset(X, y_idx, "train", None, self.graph_.arch.num_classes)
        self.history_ = run_phases(self.graph_, data, cfg).rows
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "graph_")
        X = check_images(X, channels=self.graph_.arch.in_channels)
        return predict_logits(self.graph_, X)[:, : len(self.classes_)]

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def prune(self) -> conn.PruneReport:
        """Drop blocks without an active path to the output; predictions are unchanged."""
        check_is_fitted(self, "graph_")
        self.graph_, report = conn.prune_unused(self.graph_)
        return report

    def connectivity_json(self) -> str:
        check_is_fitted(self, "graph_")
        return conn.to_json(self.graph_)
