"""Scikit-learn style wrappers so the pipeline composes with the wider
ecosystem: a fit/transform encoder and a fit/predict linear probe."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .data import Dataset
from .evaluation import extract, probe_pinv, probe_sgd
from .mathcore import as_matrix
from .trainer import RunConfig, run_pretext


class ContrastiveEncoder(BaseEstimator, TransformerMixin):
    """Self-supervised MLP encoder trained with a contrastive pretext task,
    optionally regularized by instance mixing.

    fit(X) runs the pretext stage on unlabeled rows (y is only consumed by
    the supervised pretext variants); transform(X) returns frozen backbone
    features.
    """

    def __init__(self, method="npair", imix=True, mix_operator="mixup",
                 alpha=1.0, granularity="per_batch", tau=0.1, batch_size=128,
                 epochs=50, base_lr=0.125, warmup_epochs=5, weight_decay=1e-4,
                 sgd_momentum=0.9, ema_momentum=0.99, bank_size=256,
                 hidden_dims=(128, 128, 512), batch_norm=True, maxout_sets=4,
                 proj_hidden=128, proj_dim=64, mask_p=0.0, gauss_sigma=0.0,
                 inputmix=False, spatial=(), random_state=0):
        self.method = method
        self.imix = imix
        self.mix_operator = mix_operator
        self.alpha = alpha
        self.granularity = granularity
        self.tau = tau
        self.batch_size = batch_size
        self.epochs = epochs
        self.base_lr = base_lr
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.sgd_momentum = sgd_momentum
        self.ema_momentum = ema_momentum
        self.bank_size = bank_size
        self.hidden_dims = hidden_dims
        self.batch_norm = batch_norm
        self.maxout_sets = maxout_sets
        self.proj_hidden = proj_hidden
        self.proj_dim = proj_dim
        self.mask_p = mask_p
        self.gauss_sigma = gauss_sigma
        self.inputmix = inputmix
        self.spatial = spatial
        self.random_state = random_state

    def _config(self) -> RunConfig:
        return RunConfig(
            method=self.method,
            imix=self.imix,
            mix_operator=self.mix_operator,
            mix_alpha=self.alpha,
            mix_granularity=self.granularity,
            tau=self.tau,
            batch_size=self.batch_size,
            epochs=self.epochs,
            base_lr=self.base_lr,
            warmup_epochs=self.warmup_epochs,
            weight_decay=self.weight_decay,
            sgd_momentum=self.sgd_momentum,
            ema_momentum=self.ema_momentum,
            bank_k=self.bank_size if self.method == "moco" else 0,
            seed=self.random_state,
            hidden_dims=tuple(self.hidden_dims),
            batch_norm=self.batch_norm,
            maxout_sets=self.maxout_sets,
            proj_hidden=self.proj_hidden,
            proj_dim=self.proj_dim,
            mask_p=self.mask_p,
            gauss_sigma=self.gauss_sigma,
            inputmix=self.inputmix,
        ).validate()

    def fit(self, X, y=None):
        X = as_matrix(X, "X")
        ds = Dataset(features=X, labels=y, spatial=tuple(self.spatial), name="fit")
        result = run_pretext(self._config(), ds)
        self.state_ = result.state
        self.loss_curve_ = [m.loss for m in result.metrics]
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "state_"):
            raise NotFittedError("call fit before transform")
        return extract(self.state_, as_matrix(X, "X"))


class LinearProbeClassifier(BaseEstimator, ClassifierMixin):
    """Linear classifier on frozen features: closed-form least squares via
    the pseudoinverse (solver="pinv") or SGD with the step-decay recipe and
    learning-rate grid search (solver="sgd")."""

    def __init__(self, solver="pinv", epochs=100, random_state=0):
        self.solver = solver
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X = as_matrix(X, "X")
        y = np.asarray(y).ravel()
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.solver == "pinv":
            self.probe_ = probe_pinv(X, y_idx)
        elif self.solver == "sgd":
            self.probe_ = probe_sgd(X, y_idx, epochs=self.epochs,
                                    seed=self.random_state)
        else:
            raise ValueError(f"unknown solver {self.solver!r}")
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        if not hasattr(self, "probe_"):
            raise NotFittedError("call fit before predict")
        return self.probe_.logits(as_matrix(X, "X"))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
