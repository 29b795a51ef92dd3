"""scikit-learn style wrappers around the density model and label distillation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone
from sklearn.utils.validation import check_is_fitted

from .classifier import ClassifierConfig, DensityModel, aggregate_cases, train, validate_distribution
from .distillation import DistillConfig, run_distillation
from .ptn import PtnConfig, apply_h, IntensityWindow
from .synthdata import SplitData


def check_images(X, size=None):
    """Validate an image batch; returns a float64 array of shape (N, H, W)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected images of shape (N, H, W), got {X.shape}")
    if len(X) == 0:
        raise ValueError("got an empty image batch")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    if size is not None and X.shape[1:] != (size, size):
        raise ValueError(f"expected {size}x{size} images, got {X.shape[1:]}")
    return X


def check_targets(y, n):
    """Grades (ints 0-3 or letters a-d) or (N, 4) distributions -> (N, 4) distributions."""
    y = np.asarray(y)
    if y.ndim == 2:
        out = validate_distribution(y.astype(np.float64))
    else:
        if y.dtype.kind in "US":
            y = np.array(["abcd".index(g) for g in y])
        y = y.astype(int)
        if np.any((y < 0) | (y > 3)):
            raise ValueError("grades must be in 0..3")
        out = np.eye(4)[y]
    if len(out) != n:
        raise ValueError(f"got {len(out)} targets for {n} images")
    return out


def check_windows(window, n):
    if window is None:
        return None
    w = np.asarray(window, dtype=np.float64)
    if w.shape == (2,):
        w = np.tile(w, (n, 1))
    if w.shape != (n, 2):
        raise ValueError(f"window must have shape (2,) or ({n}, 2), got {w.shape}")
    return w


class DensityClassifier(ClassifierMixin, BaseEstimator):
    """4-grade density classifier with an optional learned photometric normalizer.

    ``fit``/``predict`` take image stacks of shape (N, H, W) and an optional
    per-image intensity ``window`` of shape (N, 2) holding (u, v).  Targets
    may be grade indices or soft (N, 4) label distributions.
    """

    def __init__(self, use_ptn=True, K=10, epsilon=1e-2, lam=1.0, downsample_factor=3,
                 epochs=30, learning_rate=0.1, batch_size=32, input_size=64, random_state=0):
        self.use_ptn = use_ptn
        self.K = K
        self.epsilon = epsilon
        self.lam = lam
        self.downsample_factor = downsample_factor
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.input_size = input_size
        self.random_state = random_state

    def _configs(self):
        cfg = ClassifierConfig(input_size=self.input_size, learning_rate=self.learning_rate,
                               epochs=self.epochs, batch_size=self.batch_size)
        ptn = PtnConfig(K=self.K, epsilon=self.epsilon, lam=self.lam,
                        downsample_factor=self.downsample_factor) if self.use_ptn else None
        return cfg, ptn

    def fit(self, X, y, window=None):
        X = check_images(X, self.input_size)
        Y = check_targets(y, len(X))
        cfg, ptn = self._configs()
        self.model_ = DensityModel(cfg, ptn, seed=self.random_state)
        self.loss_curve_ = train(self.model_, X, Y, check_windows(window, len(X)), seed=self.random_state)
        self.classes_ = np.arange(4)
        return self

    def predict_proba(self, X, window=None):
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_size)
        return self.model_.predict_proba(X, check_windows(window, len(X)))

    def predict(self, X, window=None):
        return np.argmax(self.predict_proba(X, window), axis=1)

    def predict_cases(self, X, case_ids, window=None):
        """Average the views of each case; returns ``(case ids, (C, 4) probabilities)``."""
        return aggregate_cases(case_ids, self.predict_proba(X, window))

    def slopes(self, X, window=None):
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_size)
        return self.model_.predict_slopes(X, check_windows(window, len(X)))


class PhotometricNormalizer(TransformerMixin, BaseEstimator):
    """Applies the intensity map learned by a fitted :class:`DensityClassifier`.

    ``fit`` trains a clone of ``estimator`` unless it is already fitted and
    ``refit`` is False.  ``transform`` returns images in raw intensity units.
    """

    def __init__(self, estimator=None, refit=True):
        self.estimator = estimator
        self.refit = refit

    def fit(self, X, y, window=None):
        est = self.estimator if self.estimator is not None else DensityClassifier()
        if not est.use_ptn:
            raise ValueError("the wrapped estimator must use the photometric normalizer")
        if self.refit or not hasattr(est, "model_"):
            est = clone(est).fit(X, y, window)
        self.estimator_ = est
        return self

    def transform(self, X, window=None):
        check_is_fitted(self, "estimator_")
        X = check_images(X)
        w = check_windows(window, len(X))
        slopes = self.estimator_.slopes(X, w)
        ptn = self.estimator_.model_.ptn
        if w is None:
            w = np.tile([ptn.window_u, ptn.window_v], (len(X), 1))
        return np.stack([apply_h(x, s, IntensityWindow(u, v, ptn.K))
                         for x, s, (u, v) in zip(X, slopes, w)])


class LabelDistiller(BaseEstimator):
    """Pretrain ``estimator`` on all labels, then distill the gold subset's grading.

    ``fit`` needs ``is_gold`` (views labeled by the gold reader), ``case_ids``
    and a gold-labeled validation set ``(X_val, y_val, case_ids_val,
    window_val)`` used for the stopping rule.  After fitting,
    ``distilled_labels_`` holds the final per-case labels of the non-gold
    cases.
    """

    def __init__(self, estimator=None, alpha=0.5, gamma=0.25, finetune_lr=0.01, frozen_depth=2,
                 max_rounds=3, tolerance=0.002, finetune_epochs=4, retrain_epochs=4, mode="soft"):
        self.estimator = estimator
        self.alpha = alpha
        self.gamma = gamma
        self.finetune_lr = finetune_lr
        self.frozen_depth = frozen_depth
        self.max_rounds = max_rounds
        self.tolerance = tolerance
        self.finetune_epochs = finetune_epochs
        self.retrain_epochs = retrain_epochs
        self.mode = mode

    def fit(self, X, y, *, is_gold, case_ids, validation, window=None):
        est = clone(self.estimator if self.estimator is not None else DensityClassifier())
        X = check_images(X, est.input_size)
        Y = check_targets(y, len(X))
        w = check_windows(window, len(X))
        if w is None:
            w = np.tile([0.0, 1.0], (len(X), 1))
        est.fit(X, Y, w)
        is_gold = np.asarray(is_gold, dtype=bool)
        case_ids = np.asarray(case_ids)

        def split(mask, Xs, Ys, ws, cids, gold):
            n = int(mask.sum())
            return SplitData(Xs[mask], ws[mask], Ys[mask], gold[mask], cids[mask],
                             np.zeros(n, int), np.zeros(n, int), np.full(n, np.nan))

        gold_idx = np.where(is_gold, np.argmax(Y, axis=1), -1)
        d_s = split(is_gold, X, Y, w, case_ids, gold_idx)
        d_r = split(~is_gold, X, Y, w, case_ids, gold_idx)
        Xv, yv, cv, wv = validation
        Xv = check_images(Xv, est.input_size)
        Yv = check_targets(yv, len(Xv))
        wv = check_windows(wv, len(Xv))
        wv = np.tile([0.0, 1.0], (len(Xv), 1)) if wv is None else wv
        val = split(np.ones(len(Xv), bool), Xv, Yv, wv, np.asarray(cv), np.argmax(Yv, axis=1))
        cfg = DistillConfig(self.alpha, self.gamma, self.finetune_lr, self.frozen_depth, self.max_rounds,
                            self.tolerance, self.finetune_epochs, self.retrain_epochs, self.mode)
        self.state_ = run_distillation(est.model_, d_s, d_r, val, cfg, seed=est.random_state)
        self.estimator_ = est
        self.distilled_labels_ = dict(zip(self.state_.case_ids.tolist(), self.state_.labels))
        return self

    def predict_proba(self, X, window=None):
        check_is_fitted(self, "estimator_")
        return self.estimator_.predict_proba(X, window)

    def predict(self, X, window=None):
        return np.argmax(self.predict_proba(X, window), axis=1)
