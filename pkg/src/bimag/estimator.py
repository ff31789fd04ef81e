"""scikit-learn compatible continual classifier.

:class:`BImagClassifier` learns one task per :meth:`~BImagClassifier.partial_fit`
call and always scores the full class universe, so it can predict classes
it has only read about (through the attribute table) as well as classes it
saw in earlier tasks.
"""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .data import AttributeTable
from .exceptions import ConfigError
from .models import ModelBundle, extract_features
from .training import (SYNTHESIS, TrainingConfig, Variant, can_imagine, stream, synthesize_features,
                       train_cvae, train_feature_extractor, train_joint_classifier)

_DEFAULTS = TrainingConfig()


class BImagClassifier(ClassifierMixin, BaseEstimator):
    """Feature-replay continual learner with optional attribute-driven imagination.

    Parameters
    ----------
    variant : str, default='attr_bimag'
        One of 'class_bimag', 'attr_bimag', 'class_attr_bimag', 'asym_bimag',
        'joint_training'.
    attributes : array-like of shape (n_classes, n_attributes), optional
        Class-to-attribute matrix. Required by every variant whose generator
        reads attributes; it also fixes ``n_classes``.
    n_classes : int, optional
        Size of the class universe when no attribute matrix is given.
    random_state : int, default=0
        Seed of every random stream used in training.

    The remaining parameters mirror :class:`~bimag.training.TrainingConfig`.

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    seen_classes_ : ndarray
        Classes observed in any task so far, in arrival order.
    step_ : int
        Number of tasks learned.
    bundle_ : ModelBundle
        Current feature extractor, joint classifier and generators.
    history_ : list of dict
        Per-step training logs of each stage.
    """

    def __init__(self, variant="attr_bimag", attributes=None, n_classes=None,
                 lambda1=_DEFAULTS.lambda1, lambda2=_DEFAULTS.lambda2, synth_per_class=_DEFAULTS.synth_per_class,
                 lr_feature=_DEFAULTS.lr_feature, lr_vae=_DEFAULTS.lr_vae, lr_classifier=_DEFAULTS.lr_classifier,
                 epochs_feature=_DEFAULTS.epochs_feature, epochs_vae=_DEFAULTS.epochs_vae,
                 epochs_classifier=_DEFAULTS.epochs_classifier, batch_size=_DEFAULTS.batch_size,
                 feature_dim=_DEFAULTS.feature_dim, feature_hidden=_DEFAULTS.feature_hidden,
                 latent_dim=_DEFAULTS.latent_dim, enc_hidden=_DEFAULTS.enc_hidden, dec_hidden=_DEFAULTS.dec_hidden,
                 classifier_bias=_DEFAULTS.classifier_bias, classifier_warm_start=_DEFAULTS.classifier_warm_start,
                 random_state=0):
        self.variant = variant
        self.attributes = attributes
        self.n_classes = n_classes
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.synth_per_class = synth_per_class
        self.lr_feature = lr_feature
        self.lr_vae = lr_vae
        self.lr_classifier = lr_classifier
        self.epochs_feature = epochs_feature
        self.epochs_vae = epochs_vae
        self.epochs_classifier = epochs_classifier
        self.batch_size = batch_size
        self.feature_dim = feature_dim
        self.feature_hidden = feature_hidden
        self.latent_dim = latent_dim
        self.enc_hidden = enc_hidden
        self.dec_hidden = dec_hidden
        self.classifier_bias = classifier_bias
        self.classifier_warm_start = classifier_warm_start
        self.random_state = random_state

    @classmethod
    def from_config(cls, variant, cfg: TrainingConfig, table: Optional[AttributeTable] = None,
                    n_classes: Optional[int] = None) -> "BImagClassifier":
        params = cfg.to_dict()
        seed = params.pop("seed")
        for key in ("feature_hidden", "enc_hidden", "dec_hidden"):
            params[key] = tuple(params[key])
        return cls(variant=Variant(variant).value, attributes=None if table is None else table.matrix,
                   n_classes=n_classes, random_state=seed, **params)

    def training_config(self) -> TrainingConfig:
        names = set(TrainingConfig.field_names()) - {"seed"}
        return TrainingConfig(seed=int(self.random_state), **{k: getattr(self, k) for k in names}).validate()

    # -- state -------------------------------------------------------------

    def _setup(self):
        self.variant_ = Variant(self.variant)
        self.table_ = None if self.attributes is None else AttributeTable(self.attributes)
        if self.variant_.needs_attributes and self.table_ is None:
            raise ConfigError(f"variant {self.variant_.value!r} needs an attribute matrix", "attributes")
        if self.table_ is not None:
            if self.n_classes is not None and int(self.n_classes) != self.table_.n_classes:
                raise ConfigError(f"n_classes={self.n_classes} but the attribute matrix has "
                                  f"{self.table_.n_classes} rows", "n_classes")
            n = self.table_.n_classes
        elif self.n_classes is not None:
            n = int(self.n_classes)
        else:
            raise ConfigError("set n_classes or provide an attribute matrix", "n_classes")
        self.config_ = self.training_config()
        self.classes_ = np.arange(n)
        self.seen_classes_ = np.empty(0, dtype=np.int64)
        self.step_ = 0
        self.bundle_ = None
        self.history_ = []

    def fit(self, X, y, tasks=None):
        """Learn from scratch; ``tasks`` (per-sample task ids) are visited in ascending order."""
        X, y = check_X_y(X, y, dtype=np.float64)
        self._setup()
        self.n_features_in_ = X.shape[1]
        if tasks is None:
            return self.partial_fit(X, y)
        tasks = np.asarray(tasks)
        if tasks.shape != y.shape:
            raise ValueError(f"tasks has shape {tasks.shape}, labels {y.shape}")
        for k in np.unique(tasks):
            self.partial_fit(X[tasks == k], y[tasks == k])
        return self

    def partial_fit(self, X, y):
        """Learn one new task whose classes are those present in ``y``."""
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if not hasattr(self, "step_"):
            self._setup()
            self.n_features_in_ = X.shape[1]
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        n_classes = len(self.classes_)
        if y.min() < 0 or y.max() >= n_classes:
            raise ValueError(f"labels must lie in [0, {n_classes})")
        if self.variant_ is Variant.JOINT and self.step_ > 0:
            raise ValueError("joint_training learns all classes in a single task; call fit instead")
        current = np.unique(y)
        overlap = np.intersect1d(current, self.seen_classes_)
        if overlap.size:
            raise ValueError(f"classes {overlap.tolist()} were already learned in an earlier task")
        self._learn_task(X, y, current)
        return self

    def _learn_task(self, X, y, current):
        cfg, table, seed = self.config_, self.table_, self.config_.seed
        t = self.step_ + 1
        n_classes = len(self.classes_)
        prev = self.bundle_
        past = self.seen_classes_
        log: Dict[str, dict] = {"t": t}

        F, log["features"] = train_feature_extractor(None if prev is None else prev.feature_extractor,
                                                     X, y, cfg, t=t, seed=seed)
        bundle = ModelBundle(F)
        for role, mode in self.variant_.generator_modes.items():
            D_prev = None if prev is None else prev.generators[role]
            vae, log[f"generator.{role}"] = train_cvae(F, X, y, D_prev, mode, table, n_classes, past,
                                                       cfg, t=t, role=role, seed=seed)
            bundle.generators[role] = vae
            bundle.modes[role] = mode.value

        seen = np.concatenate([past, current])
        others = np.setdiff1d(self.classes_, current)
        future = np.setdiff1d(others, seen)
        imagine = {role: can_imagine(m, table) for role, m in self.variant_.generator_modes.items()}
        forward_role = "forward" if "forward" in imagine else "main"
        targets = np.setdiff1d(others, future)  # past classes
        if future.size and imagine.get(forward_role, False):
            targets = others
        Z_syn, y_syn = synthesize_features(bundle, targets, table, n_classes, cfg.synth_per_class, past,
                                           stream(seed, t, SYNTHESIS))
        with ad.no_grad():
            Z_real = extract_features(F, X)
        init = prev.classifier if (cfg.classifier_warm_start and prev is not None) else None
        bundle.classifier, log["classifier"] = train_joint_classifier(Z_real, y, Z_syn, y_syn, n_classes, cfg,
                                                                      t=t, seed=seed, init=init)
        log["synthetic_classes"] = targets.tolist()
        self.bundle_ = bundle
        self.seen_classes_ = seen
        self.step_ = t
        self.history_.append(log)

    # -- inference ---------------------------------------------------------

    def transform(self, X):
        """Features of the current extractor."""
        check_is_fitted(self, "bundle_")
        X = check_array(X, dtype=np.float64)
        with ad.no_grad():
            return extract_features(self.bundle_.feature_extractor, X)

    def decision_function(self, X):
        Z = self.transform(X)
        with ad.no_grad():
            return self.bundle_.classifier(Z).data

    def predict_proba(self, X):
        return ad.softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
