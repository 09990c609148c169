"""Scikit-learn style estimator wrappers.

These expose the pretrainer, the whitening transform, and the linear
segmenter through the fit/transform/predict protocol (with ``get_params`` /
``set_params`` via :class:`sklearn.base.BaseEstimator`) so they compose with
pipelines and model-selection tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import diagnostics, downstream, engine, nets, whitening
from .validation import check_feature_matrix, check_images, check_masks

__all__ = ["ZCAWhitening", "ContrastivePretrainer", "LinearSegmenter"]


class ZCAWhitening(BaseEstimator, TransformerMixin):
    """Symmetric (ZCA) whitening of feature rows.

    ``method="exact"`` uses an eigendecomposition; ``method="newton"`` uses
    the trace-normalized Newton iteration with ``newton_steps`` steps.
    """

    def __init__(self, method: str = "exact", eps: float = 1e-5, newton_steps: int = 5):
        self.method = method
        self.eps = eps
        self.newton_steps = newton_steps

    def fit(self, X, y=None):
        X = check_feature_matrix(X)
        if self.method not in ("exact", "newton"):
            raise ValueError(f"unknown method {self.method!r}")
        cols = X.T  # internal convention: features in rows
        self.mean_ = cols.mean(axis=1)
        if self.method == "exact":
            _, w = whitening.zca_exact(cols, eps=self.eps)
        else:
            # running_momentum=1 makes the running matrix the batch matrix
            state = whitening.WhiteningState(dim=cols.shape[0],
                                             iterations=self.newton_steps,
                                             eps=self.eps, running_momentum=1.0)
            whitening.zca_newton(cols, state, mode="train")
            w = state.running_w
        self.whitening_matrix_ = w
        return self

    def transform(self, X):
        if not hasattr(self, "whitening_matrix_"):
            raise NotFittedError("ZCAWhitening is not fitted yet")
        X = check_feature_matrix(X)
        return (X - self.mean_) @ self.whitening_matrix_.T

    def fit_transform(self, X, y=None):
        self.fit(X)
        return self.transform(X)


class ContrastivePretrainer(BaseEstimator, TransformerMixin):
    """Momentum-contrast pretraining as a transformer.

    ``fit(X)`` runs self-supervised pretraining on images ``X`` [n, C, H, W];
    ``transform(X)`` returns pooled backbone features.  The full training
    state is available as ``state_`` and can be checkpointed with ``save``.
    """

    def __init__(self, epochs: int = 20, batch_size: int = 32, queue_size: int = 1024,
                 momentum: float = 0.999, tau: float = 0.2, lambda_: float = 1.0,
                 num_patches: int = 20, lr: float = 0.03, weight_decay: float = 1e-4,
                 enable_local: bool = True, enable_whitening: bool = True,
                 seed: int = 0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.queue_size = queue_size
        self.momentum = momentum
        self.tau = tau
        self.lambda_ = lambda_
        self.num_patches = num_patches
        self.lr = lr
        self.weight_decay = weight_decay
        self.enable_local = enable_local
        self.enable_whitening = enable_whitening
        self.seed = seed

    def _config(self) -> engine.TrainConfig:
        return engine.TrainConfig(
            batch_size=self.batch_size, queue_size=self.queue_size,
            momentum=self.momentum, tau=self.tau, lambda_=self.lambda_,
            num_patches=self.num_patches, epochs=self.epochs, lr=self.lr,
            weight_decay=self.weight_decay, enable_local=self.enable_local,
            enable_whitening=self.enable_whitening, seed=self.seed,
        )

    def fit(self, X, y=None):
        X = check_images(X)
        self.state_, self.metrics_ = engine.pretrain(self._config(), X)
        return self

    def transform(self, X, source: str = "pooled"):
        if not hasattr(self, "state_"):
            raise NotFittedError("ContrastivePretrainer is not fitted yet")
        X = check_images(X)
        return engine.eval_features(self.state_, X, source=source)

    def spectrum_report(self, X, source: str = "pooled"):
        """Collapse diagnostics of this model's representations of ``X``."""
        feats = self.transform(X, source=source)
        label = "pooled_backbone" if source == "pooled" else "projector_embedding"
        return diagnostics.make_spectrum_report(feats, source=label)

    def save(self, path) -> None:
        if not hasattr(self, "state_"):
            raise NotFittedError("ContrastivePretrainer is not fitted yet")
        engine.save_checkpoint(self.state_, path)


class LinearSegmenter(BaseEstimator):
    """Linear segmentation head over a (pretrained) backbone.

    ``checkpoint_path=None`` trains the head on a randomly initialized
    backbone.  ``mode="frozen"`` touches only head parameters; ``"finetune"``
    updates the backbone as well (converting a whitening layer to batch norm
    first, unless disabled).
    """

    def __init__(self, checkpoint_path=None, mode: str = "frozen",
                 iterations: int = 2000, lr=None, label_fraction: float = 1.0,
                 combination_seed: int = 0, convert_whitening: bool = True,
                 batch_size: int = 8, num_classes: int = 5):
        self.checkpoint_path = checkpoint_path
        self.mode = mode
        self.iterations = iterations
        self.lr = lr
        self.label_fraction = label_fraction
        self.combination_seed = combination_seed
        self.convert_whitening = convert_whitening
        self.batch_size = batch_size
        self.num_classes = num_classes

    def _config(self) -> downstream.EvalConfig:
        return downstream.EvalConfig(
            mode=self.mode, label_fraction=self.label_fraction,
            combination_seed=self.combination_seed, iterations=self.iterations,
            lr=self.lr, checkpoint_path=self.checkpoint_path,
            convert_whitening=self.convert_whitening, batch_size=self.batch_size,
        )

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        from .phantoms import split_labels

        subset = split_labels(X.shape[0], self.label_fraction, self.combination_seed)
        self.model_, self.loss_log_ = downstream.fit_segmentation_head(
            self._config(), X[subset], y[subset], self.num_classes)
        return self

    def predict(self, X):
        if not hasattr(self, "model_"):
            raise NotFittedError("LinearSegmenter is not fitted yet")
        X = check_images(X)
        return downstream.predict_masks(self.model_, X)

    def score(self, X, y):
        """Mean Dice over foreground classes on (X, y)."""
        preds = self.predict(X)
        y = check_masks(y, check_images(X))
        return downstream.evaluate_masks(preds, y, self.num_classes).mean
