"""Scikit-learn style wrapper around the segmentation engine.

VolumetricSegmenter exposes fit/predict/predict_proba/score over lists of
3-D image arrays and binary label arrays, so the engine composes with the
usual estimator tooling (get_params/set_params, clone).
"""

import numpy as np
from sklearn.base import BaseEstimator

from .augment import augment as _augment
from .losses import LossConfig, dice_score
from .models import ModelConfig, build_model, experiment_name
from .optim import TrainConfig, training_loop
from .params import ConfigurationError


class VolumetricSegmenter(BaseEstimator):
    """3-D segmentation estimator over fixed-size volumes.

    X is a sequence of 3-D float arrays of identical dims (already
    preprocessed to the model input shape); y is a matching sequence of
    binary label arrays.
    """

    def __init__(self, levels=3, filters=(8, 16, 32), attention="none",
                 multiscale_input=False, deep_supervision=False,
                 loss="dice", lr=1e-3, physical_batch=2,
                 accumulation_steps=1, patience_epochs=30, max_epochs=100,
                 validation_fraction=0.2, augment=False, seed=0):
        self.levels = levels
        self.filters = filters
        self.attention = attention
        self.multiscale_input = multiscale_input
        self.deep_supervision = deep_supervision
        self.loss = loss
        self.lr = lr
        self.physical_batch = physical_batch
        self.accumulation_steps = accumulation_steps
        self.patience_epochs = patience_epochs
        self.max_epochs = max_epochs
        self.validation_fraction = validation_fraction
        self.augment = augment
        self.seed = seed

    def _check_X(self, X):
        arrays = [np.asarray(x, dtype=np.float32) for x in X]
        if not arrays:
            raise ValueError("X is empty")
        shape = arrays[0].shape
        if len(shape) != 3 or any(a.shape != shape for a in arrays):
            raise ValueError("X must hold 3-D arrays of identical dims")
        return arrays, shape

    def fit(self, X, y, validation_data=None):
        X, shape = self._check_X(X)
        y = [np.asarray(t).astype(np.uint8) for t in y]
        if len(X) != len(y):
            raise ValueError("X and y lengths differ")
        config = ModelConfig(levels=self.levels, filters=tuple(self.filters),
                             attention=self.attention,
                             multiscale_input=self.multiscale_input,
                             deep_supervision=self.deep_supervision,
                             input_shape=shape)
        self.model_ = build_model(config, seed=self.seed)
        pairs = list(zip(X, y))
        if validation_data is not None:
            val_pairs = [(np.asarray(a, dtype=np.float32),
                          np.asarray(b).astype(np.uint8))
                         for a, b in zip(*validation_data)]
            train_pairs = pairs
        else:
            n_val = max(1, int(round(self.validation_fraction * len(pairs))))
            if n_val >= len(pairs):
                raise ConfigurationError(
                    "not enough samples to hold out a validation split")
            order = np.random.default_rng(self.seed).permutation(len(pairs))
            val_pairs = [pairs[i] for i in order[:n_val]]
            train_pairs = [pairs[i] for i in order[n_val:]]
        train_config = TrainConfig(lr=self.lr,
                                   physical_batch=self.physical_batch,
                                   accumulation_steps=self.accumulation_steps,
                                   patience_epochs=self.patience_epochs,
                                   max_epochs=self.max_epochs,
                                   seed=self.seed, augment=self.augment)
        loss_config = LossConfig(kind=self.loss)
        augment_fn = (lambda img, lab, rng: _augment(img, lab, rng)[:2])
        self.result_ = training_loop(self.model_, train_pairs, val_pairs,
                                     train_config, loss_config,
                                     augment_fn=augment_fn)
        self.experiment_name_ = experiment_name(
            config, accumulation_steps=self.accumulation_steps,
            loss_kind=self.loss)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def predict_proba(self, X):
        """Tumor-probability map per volume."""
        self._require_fitted()
        X, shape = self._check_X(X)
        if shape != self.model_.config.input_shape:
            raise ValueError(
                f"volume dims {shape} do not match the fitted model input "
                f"{self.model_.config.input_shape}")
        return [self.model_.predict_proba(x)[0, 1] for x in X]

    def predict(self, X, threshold=0.5):
        return [(p >= threshold).astype(np.uint8)
                for p in self.predict_proba(X)]

    def score(self, X, y, threshold=0.5):
        """Mean Dice over the given volumes."""
        preds = self.predict(X, threshold=threshold)
        return float(np.mean([dice_score(p, np.asarray(t) > 0)
                              for p, t in zip(preds, y)]))
