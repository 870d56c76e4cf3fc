"""scikit-learn style estimators that fine-tune a frozen backbone through PEFT attachments."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .backbone import Backbone, check_tokens, forward
from .designspace import DesignPoint, materialize
from .errors import ConfigError, HyperparameterError, InputError
from .optim import AdamW, lr_at
from .peft import count_trainable


def check_token_matrix(X, model):
    """Validate a batch of token ids against ``model``'s vocabulary and length."""
    if X is None:
        raise InputError("X is None")
    X = np.asarray(X)
    if X.ndim != 2:
        raise InputError(f"X must be 2-D (samples x tokens), got shape {X.shape}")
    if len(X) == 0:
        raise InputError("X has no samples")
    if np.issubdtype(X.dtype, np.floating) and np.array_equal(X, np.round(X)):
        X = X.astype(np.int64)
    return check_tokens(model, X)


def _check_targets(y, n, kind):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise InputError(f"y must be 1-D with {n} entries, got shape {y.shape}")
    if kind == "regression":
        y = y.astype(np.float64)
        if not np.isfinite(y).all():
            raise InputError("y contains non-finite targets")
    return y


class _PEFTEstimator(BaseEstimator):
    _kind = None

    def __init__(self, backbone=None, design=None, epochs=3, learning_rate=1e-3, head_learning_rate=3e-2,
                 weight_decay=0.01, warmup_ratio=0.06, batch_size=32, random_state=0):
        self.backbone = backbone
        self.design = design
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.head_learning_rate = head_learning_rate
        self.weight_decay = weight_decay
        self.warmup_ratio = warmup_ratio
        self.batch_size = batch_size
        self.random_state = random_state

    def _validate_params(self):
        if not isinstance(self.backbone, Backbone):
            raise ConfigError("backbone must be a Backbone (build one or load a checkpoint)")
        if self.design is not None and not isinstance(self.design, DesignPoint):
            raise ConfigError("design must be a DesignPoint or None")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise HyperparameterError(f"epochs must be a positive integer, got {self.epochs}")
        if not self.learning_rate > 0:
            raise HyperparameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.head_learning_rate is not None and not self.head_learning_rate > 0:
            raise HyperparameterError(f"head_learning_rate must be positive, got {self.head_learning_rate}")
        if self.weight_decay < 0 or not 0 <= self.warmup_ratio < 1:
            raise HyperparameterError("weight_decay must be >= 0 and warmup_ratio in [0, 1)")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise HyperparameterError(f"batch_size must be a positive integer, got {self.batch_size}")

    def _prepare(self, num_outputs):
        model = self.backbone.clone()
        model.freeze_all()
        model.reset_head(num_outputs, rng=np.random.default_rng([self.random_state, 707]))
        if self.design is not None:
            materialize(model, self.design)
        return model

    def _loss(self, logits, targets):
        raise NotImplementedError

    def _fit(self, X, targets, num_outputs):
        model = self._prepare(num_outputs)
        params = model.trainable()
        head_lr = self.learning_rate if self.head_learning_rate is None else self.head_learning_rate
        scale = {n: head_lr / self.learning_rate for n in params if n.startswith("head.")}
        opt = AdamW(params, self.weight_decay, lr_scale=scale)
        n = len(X)
        per_epoch = math.ceil(n / self.batch_size)
        total = per_epoch * self.epochs
        rng = np.random.default_rng([self.random_state, 606])
        self.loss_curve_ = []
        step = 0
        for _ in range(self.epochs):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                loss = self._loss(forward(model, X[idx]), targets[idx])
                loss.check_finite()
                loss.backward()
                opt.step(lr_at(step, total, self.learning_rate, self.warmup_ratio))
                step += 1
                losses.append(float(loss.data))
            self.loss_curve_.append(float(np.mean(losses)))
        self.model_ = model
        self.n_trainable_ = count_trainable(model, include_head=False)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_token_matrix(X, self.model_)
        outs = []
        with T.no_grad():
            for start in range(0, len(X), 256):
                outs.append(forward(self.model_, X[start:start + 256]).data)
        return np.concatenate(outs).astype(np.float64)


class PEFTClassifier(ClassifierMixin, _PEFTEstimator):
    """Fits a fresh classification head plus the design's attachments; the backbone stays frozen.

    >>> clf = PEFTClassifier(backbone, design=point, epochs=3).fit(X, y)   # doctest: +SKIP
    >>> clf.predict(X_val)                                                 # doctest: +SKIP
    """

    _kind = "classification"

    def _loss(self, logits, targets):
        return T.cross_entropy(logits, targets)

    def fit(self, X, y):
        self._validate_params()
        X = check_token_matrix(X, self.backbone)
        y = _check_targets(y, len(X), self._kind)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise InputError("need at least two classes in y")
        return self._fit(X, encoded.astype(np.int64), len(self.classes_))

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class PEFTRegressor(RegressorMixin, _PEFTEstimator):
    _kind = "regression"

    def _loss(self, logits, targets):
        return T.mse(logits, targets[:, None])

    def fit(self, X, y):
        self._validate_params()
        X = check_token_matrix(X, self.backbone)
        y = _check_targets(y, len(X), self._kind)
        return self._fit(X, y, 1)

    def predict(self, X):
        return self.decision_function(X)[:, 0]
