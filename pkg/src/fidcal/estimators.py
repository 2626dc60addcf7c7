"""Estimator-style wrappers around the classifier and calibration trainers."""

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted

from . import backbones as bb
from .calibration import build_calibration
from .degrade import MIXTURE_SIGMAS
from .fidelity import mixture_stats
from .imaging import check_images
from .train import (TrainConfig, eval_stack, fidelity_batch, fit_calibration, fit_classifier,
                    predict_calibrated, predict_logits, restore_stack)


def _holdout(X, y, fraction, seed):
    X = check_images(X)
    y = np.asarray(y)
    if len(X) != len(y):
        raise ValueError(f"{len(X)} images but {len(y)} labels")
    idx = np.arange(len(y))
    tr, va = train_test_split(idx, test_size=fraction, random_state=seed, stratify=y)
    return [X[i] for i in tr], y[tr], [X[i] for i in va], y[va]


def _unwrap(obj, attr):
    return getattr(obj, attr, obj)


class BackboneClassifier(ClassifierMixin, BaseEstimator):
    """Trains a backbone under one baseline regime on raw C×H×W images.

    A stratified ``validation_fraction`` of the training data selects the
    best epoch. ``predict`` expects images that already carry whatever
    degradation is being evaluated.
    """

    def __init__(self, arch="desk", regime="setup1_clean", denoiser=None, crop_size=32,
                 optimizer="nag", lr_init=0.05, batch_size=64, epochs=30, warmup_epochs=3,
                 label_smoothing_eps=0.1, sigmas=MIXTURE_SIGMAS, validation_fraction=0.2, seed=0):
        self.arch = arch
        self.regime = regime
        self.denoiser = denoiser
        self.crop_size = crop_size
        self.optimizer = optimizer
        self.lr_init = lr_init
        self.batch_size = batch_size
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.label_smoothing_eps = label_smoothing_eps
        self.sigmas = sigmas
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _train_config(self):
        return TrainConfig(optimizer=self.optimizer, lr_init=self.lr_init, batch_size=self.batch_size,
                           epochs=self.epochs, warmup_epochs=self.warmup_epochs,
                           label_smoothing_eps=self.label_smoothing_eps, seed=self.seed,
                           regime=self.regime, crop_size=self.crop_size, sigmas=tuple(self.sigmas))

    def fit(self, X, y):
        tr, ytr, va, yva = _holdout(X, y, self.validation_fraction, self.seed)
        self.classes_ = np.unique(ytr)
        if not np.array_equal(self.classes_, np.arange(len(self.classes_))):
            raise ValueError("labels must be the integers 0..K-1")
        torch.manual_seed(self.seed)
        model = bb.build_backbone(self.arch, len(self.classes_))
        res = fit_classifier(tr, ytr, va, yva, self._train_config(), model,
                             denoiser=_unwrap(self.denoiser, "model_"))
        self.model_ = res.model
        self.history_ = res.history
        self.best_epoch_ = res.best_epoch
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, eval_stack(check_images(X), self.crop_size)).numpy()

    def predict_proba(self, X):
        return torch.softmax(torch.from_numpy(self.decision_function(X)), 1).numpy()

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(1)]


class CalibratedClassifier(ClassifierMixin, BaseEstimator):
    """Fidelity-conditioned calibration on top of a frozen, fitted backbone.

    ``fit`` takes clean images; degradation, restoration and fidelity maps
    are synthesized per batch. ``predict`` takes degraded images plus, for
    oracle fidelity, their clean counterparts.
    """

    def __init__(self, backbone=None, denoiser=None, estimator=None, fidelity_source="oracle",
                 modules=None, conv_hidden=16, fc_hidden=None, downsampling="bilinear",
                 fidelity_metric="l1", crop_size=32, lr_init=0.01, batch_size=64, epochs=30,
                 warmup_epochs=3, label_smoothing_eps=0.1, sigmas=MIXTURE_SIGMAS,
                 validation_fraction=0.2, seed=0):
        self.backbone = backbone
        self.denoiser = denoiser
        self.estimator = estimator
        self.fidelity_source = fidelity_source
        self.modules = modules
        self.conv_hidden = conv_hidden
        self.fc_hidden = fc_hidden
        self.downsampling = downsampling
        self.fidelity_metric = fidelity_metric
        self.crop_size = crop_size
        self.lr_init = lr_init
        self.batch_size = batch_size
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.label_smoothing_eps = label_smoothing_eps
        self.sigmas = sigmas
        self.validation_fraction = validation_fraction
        self.seed = seed

    def fit(self, X, y):
        if self.backbone is None or self.denoiser is None:
            raise ValueError("CalibratedClassifier needs a fitted backbone and denoiser")
        tr, ytr, va, yva = _holdout(X, y, self.validation_fraction, self.seed)
        self.classes_ = np.unique(ytr)
        self.split_ = bb.split_backbone(_unwrap(self.backbone, "model_")).freeze()
        self.denoiser_ = _unwrap(self.denoiser, "model_")
        self.estimator_ = _unwrap(self.estimator, "model_")
        self.stats_ = mixture_stats(tuple(self.sigmas))
        calib = build_calibration(self.split_, (3, self.crop_size, self.crop_size), self.modules,
                                  self.conv_hidden, self.fc_hidden, self.downsampling, self.seed)
        cfg = TrainConfig(lr_init=self.lr_init, batch_size=self.batch_size, epochs=self.epochs,
                          warmup_epochs=self.warmup_epochs, label_smoothing_eps=self.label_smoothing_eps,
                          seed=self.seed, regime="calib_oracle", crop_size=self.crop_size,
                          sigmas=tuple(self.sigmas), fidelity_metric=self.fidelity_metric)
        res = fit_calibration(tr, ytr, va, yva, cfg, self.split_, calib, self.denoiser_,
                              self.fidelity_source, self.estimator_, self.stats_)
        self.model_ = res.model
        self.history_ = res.history
        return self

    def decision_function(self, X, clean=None):
        check_is_fitted(self, "model_")
        noisy = eval_stack(check_images(X), self.crop_size)
        restored = restore_stack(self.denoiser_, noisy)
        ref = None if clean is None else eval_stack(check_images(clean), self.crop_size)
        source = "oracle" if self.fidelity_source == "oracle" else "estimator"
        with torch.no_grad():
            fid = fidelity_batch(restored, ref, noisy, source, self.fidelity_metric, self.stats_,
                                 self.estimator_)
        return predict_calibrated(self.split_, self.model_, restored, fid).numpy()

    def predict(self, X, clean=None):
        scores = self.decision_function(X, clean)
        return self.classes_[scores.argmax(1)]

    def score(self, X, y, clean=None):
        return float(np.mean(self.predict(X, clean) == np.asarray(y)))
