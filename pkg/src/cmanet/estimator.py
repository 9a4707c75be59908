"""scikit-learn style wrapper around the two-branch CMA classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from cmanet.model import build_model, flow_config, rgb_config
from cmanet.training import TrainConfig, iterative_train, snippet_scores
from cmanet.validation import check_fusion_weights, check_positive_int, check_random_state, check_videos


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class CMAVideoClassifier(ClassifierMixin, BaseEstimator):
    """Two-stream video classifier trained with the iterative CMA protocol.

    ``X`` is either a :class:`~cmanet.data.VideoDataset` or a packed array of
    shape ``[n, T, H, W, 5]`` (see :func:`cmanet.validation.pack_videos`).
    Predictions fuse the two branches' consensus scores with ``fusion_weights``;
    ``None`` picks the weights of the last trained iteration.
    """

    def __init__(
        self,
        stage_channels=(16, 32, 64),
        blocks_per_stage=2,
        cma_insertion=((1, 0), (2, 0)),
        iterations=1,
        epochs=10,
        pretrain_epochs=-1,
        lr=0.01,
        batch_size=16,
        dropout=0.7,
        segments=3,
        fusion_weights=None,
        random_state=0,
    ):
        self.stage_channels = stage_channels
        self.blocks_per_stage = blocks_per_stage
        self.cma_insertion = cma_insertion
        self.iterations = iterations
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.dropout = dropout
        self.segments = segments
        self.fusion_weights = fusion_weights
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=float(self.lr),
            dropout=float(self.dropout),
            batch_size=check_positive_int("batch_size", self.batch_size),
            segments_train=check_positive_int("segments", self.segments),
            segments_test=check_positive_int("segments", self.segments),
            epochs_per_iteration=check_positive_int("epochs", self.epochs),
            pretrain_epochs=int(self.pretrain_epochs),
            iteration_count=check_positive_int("iterations", self.iterations, minimum=0),
            seed=check_random_state(self.random_state),
        )

    @staticmethod
    def _raw_labels(X, y):
        if y is not None:
            return np.asarray(y)
        if hasattr(X, "labels"):
            return np.asarray(X.labels)
        raise ValueError("y is required when X is a packed array")

    def fit(self, X, y=None, X_val=None, y_val=None):
        y_raw = self._raw_labels(X, y)
        if y_raw.ndim != 1:
            raise ValueError(f"y must be 1-D, got shape {y_raw.shape}")
        self.classes_, encoded = np.unique(y_raw, return_inverse=True)
        ds = check_videos(X, encoded, n_classes=len(self.classes_))
        val = None
        if X_val is not None:
            yv = self._raw_labels(X_val, y_val)
            if not np.all(np.isin(yv, self.classes_)):
                raise ValueError("validation labels contain classes absent from training")
            val = check_videos(X_val, np.searchsorted(self.classes_, yv), n_classes=len(self.classes_))
        cfg = self._train_config()
        kw = dict(stage_channels=tuple(self.stage_channels), blocks_per_stage=self.blocks_per_stage,
                  cma_insertion=tuple(tuple(p) for p in self.cma_insertion), num_classes=len(self.classes_),
                  dropout=cfg.dropout)
        self.model_ = build_model(rgb_config(**kw), flow_config(**kw), seed=cfg.seed)
        self.reports_ = iterative_train(self.model_, ds, cfg, val)
        self.fusion_weights_ = (check_fusion_weights(self.fusion_weights) if self.fusion_weights is not None
                                else cfg.fusion_weights(cfg.iteration_count))
        self.n_frames_ = ds.frames.shape[1]
        self.frame_shape_ = ds.frames.shape[2:4]
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("CMAVideoClassifier is not fitted yet; call fit first")

    def branch_scores(self, X):
        """Consensus logits ``(rgb, flow)``, each ``[n, n_classes]``."""
        self._check_fitted()
        ds = check_videos(X, n_classes=len(self.classes_), ignore_labels=True)
        if ds.frames.shape[2:4] != tuple(self.frame_shape_):
            raise ValueError(f"frames are {ds.frames.shape[2:4]}, model was fitted on {tuple(self.frame_shape_)}")
        rs, fs = snippet_scores(self.model_, ds, int(self.segments))
        return rs.mean(axis=1), fs.mean(axis=1)

    def decision_function(self, X) -> np.ndarray:
        rs, fs = self.branch_scores(X)
        w_rgb, w_flow = self.fusion_weights_
        return w_rgb * rs + w_flow * fs

    def predict_proba(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return _softmax(scores / sum(self.fusion_weights_))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
