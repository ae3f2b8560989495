"""scikit-learn style wrappers around the training curriculum."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import applications as apps
from ._validation import ValidationError, check_images, check_labels
from .data import AugmentationConfig, DatasetManifest
from .losses import LossWeights
from .networks import NetworkSpec
from .trainer import OptimizerConfig, StageBudgets, TrainingData, TrainState, run_curriculum


def _split_targets(y):
    y = np.asarray(y)
    if y.ndim != 2 or y.shape[1] != 2:
        raise ValidationError(f"y must be [n, 2] (expression, identity) labels, got shape {y.shape}")
    return y[:, 0], y[:, 1]


class TERGAN(TransformerMixin, BaseEstimator):
    """Train the two encoders and decoder on labelled face images.

    ``fit(X, y)`` takes images ``[n, S, S, 3]`` in [0, 1] and ``y`` of shape
    ``[n, 2]`` holding expression and identity labels. ``transform`` returns
    the expression embedding f(e).

    Parameters
    ----------
    width_divisor : int
        Divides every hidden width of the full-size networks (1 = full size).
    augmentation : AugmentationConfig or None
        Applied once to the training images; None trains on the originals.
    """

    def __init__(self, expr_dim: int = 30, id_dim: int = 50, width_divisor: int = 1,
                 weights: Optional[LossWeights] = None, learning_rate: float = 2e-4,
                 batch_size: int = 64, pretrain_expr_steps: int = 2000,
                 pretrain_id_steps: int = 2000, adversarial_steps: int = 10000,
                 same_identity_prob: float = 1.0,
                 augmentation: Optional[AugmentationConfig] = None, seed: int = 0):
        self.expr_dim = expr_dim
        self.id_dim = id_dim
        self.width_divisor = width_divisor
        self.weights = weights
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.pretrain_expr_steps = pretrain_expr_steps
        self.pretrain_id_steps = pretrain_id_steps
        self.adversarial_steps = adversarial_steps
        self.same_identity_prob = same_identity_prob
        self.augmentation = augmentation
        self.seed = seed

    def fit(self, X, y, metrics=None):
        X = check_images(X, name="X")
        y_e, y_i = _split_targets(y)
        n_e, n_i = int(np.max(y_e)) + 1, int(np.max(y_i)) + 1
        y_e, y_i = check_labels(y_e, n_e, "expression"), check_labels(y_i, n_i, "identity")
        if len(y_e) != len(X):
            raise ValidationError(f"X has {len(X)} images but y has {len(y_e)} rows")
        spec = NetworkSpec(image_size=X.shape[1], expr_dim=self.expr_dim, id_dim=self.id_dim,
                           n_expressions=n_e, n_identities=n_i)
        if self.width_divisor != 1:
            spec = spec.scaled(self.width_divisor)
        spec.validate()
        manifest = DatasetManifest(
            records=[{"expression": int(e), "identity": int(i)} for e, i in zip(y_e, y_i)],
            n_expressions=n_e, n_identities=n_i, image_size=X.shape[1])
        data = TrainingData.from_images(manifest, X, self.augmentation,
                                        same_identity_prob=self.same_identity_prob)
        opt = OptimizerConfig(learning_rate=self.learning_rate, batch_size=self.batch_size)
        self.state_ = TrainState(spec, self.weights or LossWeights(), opt, self.seed)
        run_curriculum(self.state_, data, StageBudgets(
            self.pretrain_expr_steps, self.pretrain_id_steps, self.adversarial_steps), metrics)
        self.n_expressions_, self.n_identities_ = n_e, n_i
        return self

    @classmethod
    def from_state(cls, state: TrainState) -> "TERGAN":
        """Wrap an already trained (e.g. loaded) state."""
        est = cls(expr_dim=state.spec.expr_dim, id_dim=state.spec.id_dim,
                  weights=state.weights, learning_rate=state.opt_cfg.learning_rate,
                  batch_size=state.opt_cfg.batch_size, seed=state.seed)
        est.state_ = state
        est.n_expressions_, est.n_identities_ = state.spec.n_expressions, state.spec.n_identities
        return est

    def transform(self, X, baseline: bool = False):
        check_is_fitted(self, "state_")
        return apps.encode_expressions(self.state_, X, baseline=baseline)

    def transfer(self, source, target):
        check_is_fitted(self, "state_")
        return apps.transfer(self.state_, source, target)

    def edit(self, target, expression_exemplar):
        check_is_fitted(self, "state_")
        return apps.edit(self.state_, target, expression_exemplar)


class ExpressionRecognizer(ClassifierMixin, BaseEstimator):
    """Shallow probe on the detached expression encoder of a fitted :class:`TERGAN`."""

    def __init__(self, model: TERGAN = None, baseline: bool = False, seed: int = 0):
        self.model = model
        self.baseline = baseline
        self.seed = seed

    def fit(self, X, y):
        if self.model is None:
            raise ValidationError("ExpressionRecognizer needs a fitted TERGAN model")
        emb = self.model.transform(X, baseline=self.baseline)
        y = np.asarray(y)
        self.probe_ = apps.make_probe(self.seed).fit(emb, y)
        self.classes_ = self.probe_.classes_
        return self

    def predict(self, X):
        check_is_fitted(self, "probe_")
        return self.probe_.predict(self.model.transform(X, baseline=self.baseline))

    def predict_proba(self, X):
        check_is_fitted(self, "probe_")
        return self.probe_.predict_proba(self.model.transform(X, baseline=self.baseline))
