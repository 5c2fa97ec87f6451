"""scikit-learn compatible binary image classifier built on the VGG stack."""
from __future__ import annotations

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .data import ImageRecord, LabeledDataset, PreprocessConfig, preprocess, split_dataset
from .nn import Network
from .train import TrainConfig, run_training
from .vgg import build_vgg16, build_vgg_mini, network_from_archive, replace_head


def check_images(X) -> np.ndarray:
    """Validate a batch of RGB images shaped (n, height, width, 3) with values in [0, 255]."""
    X = check_array(X, allow_nd=True, dtype=None, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped (n, height, width, 3), got {X.shape}")
    if X.dtype != np.uint8:
        if X.min() < 0 or X.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        X = np.floor(X.astype(np.float64) + 0.5).astype(np.uint8)
    return X


class VggImageClassifier(ClassifierMixin, BaseEstimator):
    """Binary classifier that fine-tunes a replaced sigmoid head on a VGG backbone.

    ``fit`` holds out ``validation_fraction`` of the images (stratified) for
    early stopping. The second entry of ``classes_`` is the positive class.

    Parameters
    ----------
    arch : {"mini", "vgg16"}
        Backbone to build when ``init_weights`` is not given.
    init_weights : str or None
        Path to a weight archive used as the pretrained backbone.
    freeze_backbone : bool
        Train only the new head.
    """

    def __init__(self, arch: str = "mini", init_weights: Optional[str] = None,
                 freeze_backbone: bool = True, batch_size: int = 32, max_epochs: int = 20,
                 learning_rate: float = 1e-4, patience: int = 2, validation_fraction: float = 0.2,
                 augment: bool = True, threshold: float = 0.5, random_state: int = 0):
        self.arch = arch
        self.init_weights = init_weights
        self.freeze_backbone = freeze_backbone
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.learning_rate = learning_rate
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.augment = augment
        self.threshold = threshold
        self.random_state = random_state

    def _backbone(self) -> Network:
        if self.init_weights is not None:
            return network_from_archive(self.init_weights)
        if self.arch == "mini":
            return build_vgg_mini(seed=self.random_state)
        if self.arch == "vgg16":
            return build_vgg16(1000, seed=self.random_state)
        raise ValueError(f"unknown arch {self.arch!r}")

    def _records(self, X, labels=None) -> List[ImageRecord]:
        if labels is None:
            return [ImageRecord(x) for x in X]
        return [ImageRecord(x, lab) for x, lab in zip(X, labels)]

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} images but y has {len(y)} labels")
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError(f"binary targets required, got classes {self.classes_.tolist()}")
        names = [str(c) for c in self.classes_]
        lookup = dict(zip(self.classes_.tolist(), names))
        ds = LabeledDataset(self._records(X, [lookup[v] for v in y.tolist()]), names)
        train_ds, val_ds = split_dataset(ds, 1 - self.validation_fraction, self.random_state)

        net = replace_head(self._backbone(), 1, self.freeze_backbone, seed=self.random_state)
        config = TrainConfig(batch_size=self.batch_size, max_epochs=self.max_epochs,
                             learning_rate=self.learning_rate, patience=self.patience,
                             seed=self.random_state, freeze_backbone=self.freeze_backbone,
                             augment=self.augment)
        self.net_, self.history_ = run_training(net, train_ds, val_ds, config)
        self.n_epochs_ = len(self.history_)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X)
        cfg = PreprocessConfig(target_size=self.net_.input_shape[1])
        p = []
        for start in range(0, len(X), self.batch_size):
            chunk = np.stack([preprocess(r, cfg) for r in self._records(X[start:start + self.batch_size])])
            p.append(self.net_.forward(chunk, "eval").reshape(-1))
        p = np.concatenate(p).astype(np.float64)
        return np.column_stack([1 - p, p])

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)[:, 1]
        return self.classes_[(proba >= self.threshold).astype(int)]
