"""Scikit-learn adapters around the library's training entry points.

Constructor arguments are stored verbatim and fitted state lives in
trailing-underscore attributes, so get_params/set_params, clone, and
pipeline composition behave the way sklearn tooling expects. The
underlying trainers remain the source of truth; these classes only
translate between array conventions.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import datagen, losses
from . import pipeline as pl
from . import quantile as qm
from . import snn
from .exceptions import DataError, ShapeError


def _series(X, min_rows: int = 2) -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_2d=True,
                    ensure_min_samples=min_rows)
    return np.ascontiguousarray(X)


def _step_labels(y, n_rows: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_rows,):
        raise ShapeError(f"labels must be one per time step, "
                         f"expected ({n_rows},), got {y.shape}")
    return (y != 0).astype(np.int8)


class QuantileForecaster(BaseEstimator):
    """Per-channel conditional quantile estimates at a fixed horizon.

    fit consumes a [T, C] chronological series; a trailing fraction is
    held out for early stopping. predict maps current readings [N, C]
    to quantile estimates [N, C, L], optionally refined to a subset of
    levels by a second stage.
    """

    def __init__(self, levels=qm.STAGE1_LEVELS, refine_levels=None,
                 horizon: int = 1, loss: str = losses.ASYMMETRIC_HUBER,
                 max_epochs: int = 120, patience: int = 12,
                 val_fraction: float = 0.2, seed: int = 0):
        self.levels = levels
        self.refine_levels = refine_levels
        self.horizon = horizon
        self.loss = loss
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y=None):
        X = _series(X, min_rows=self.horizon + 2)
        if not 0.0 < self.val_fraction < 1.0:
            raise DataError("val_fraction must lie strictly in (0, 1)")
        T = X.shape[0]
        cut = max(1, int(T * (1.0 - self.val_fraction)))
        if cut >= T:
            cut = T - 1
        self.stage1_ = qm.train_stage1(
            X, np.arange(cut), np.arange(cut, T), levels=self.levels,
            loss=self.loss, horizon=self.horizon, seed=self.seed,
            max_epochs=self.max_epochs, patience=self.patience)
        self.stage2_ = None
        if self.refine_levels is not None:
            pairs = np.arange(T - self.horizon)
            tr, va = pairs[pairs < cut], pairs[pairs >= cut]
            est = self.stage1_.predict(X)
            yh = np.roll(X, -self.horizon, axis=0)
            self.stage2_ = qm.refine_stage2(
                est[tr], yh[tr], est[va], yh[va],
                subset=self.refine_levels, source_levels=self.levels,
                seed=self.seed, max_epochs=self.max_epochs,
                patience=self.patience)
        self.n_features_in_ = X.shape[1]
        self.levels_ = tuple(self.stage2_.levels) if self.stage2_ \
            else tuple(self.stage1_.levels)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "stage1_")
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} channels, "
                             f"got {X.shape[1]}")
        est = self.stage1_.predict(X)
        return self.stage2_.predict(est) if self.stage2_ else est

    def score(self, X, y) -> float:
        """Negative mean pinball loss over all levels (higher is better)."""
        est = self.predict(X)
        y = np.asarray(y, dtype=np.float64)
        if y.shape != est.shape[:2]:
            raise ShapeError("targets must be one future value per channel")
        total = 0.0
        for k, a in enumerate(self.levels_):
            r = y - est[:, :, k]
            total += float(np.mean(np.maximum(a * r, (a - 1.0) * r)))
        return -total / len(self.levels_)


class RateScaler(TransformerMixin, BaseEstimator):
    """Maps features onto firing rates, optionally onto expected counts.

    fit learns a robust per-column span (1st-99th percentile) so that
    contaminated training data cannot compress the normal band; see
    RateNormalizer. transform rescales into [0, 1] and applies the
    threshold-linear rate code.
    """

    def __init__(self, tau: float = 0.0, r_max: float = 1.0,
                 t_window: int = 0):
        self.tau = tau
        self.r_max = r_max
        self.t_window = t_window   # 0 -> emit rates, else expected counts

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        self.normalizer_ = pl.RateNormalizer.fit(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "normalizer_")
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} columns, "
                             f"got {X.shape[1]}")
        rates = snn.encode_rate(self.normalizer_(X), self.tau, self.r_max)
        if self.t_window:
            return snn.expected_spikes(rates, self.t_window)
        return rates


class AnomalyDetector(BaseEstimator):
    """Full three-stage pipeline behind a fit/predict facade.

    fit takes the raw [T, C] series with one 0/1 label per time step;
    windowing, splits, and the stage-wise recipes come from
    train_pipeline. predict slices new series with the fitted window
    geometry and returns one Abnormal flag per window (so the output
    is shorter than the input series; window_starts gives the
    alignment).
    """

    def __init__(self, window_len: int = 24, stride: int = 4,
                 horizon: int = 4, coupling: str = pl.COUPLING_FULL,
                 lam: float = 0.1, theta_c: float = 0.5,
                 snn_hidden: int = 64, t_window: int = 50,
                 use_calibrated_theta: bool = False,
                 settings: pl.PipelineSettings | None = None,
                 seed: int = 0):
        self.window_len = window_len
        self.stride = stride
        self.horizon = horizon
        self.coupling = coupling
        self.lam = lam
        self.theta_c = theta_c
        self.snn_hidden = snn_hidden
        self.t_window = t_window
        self.use_calibrated_theta = use_calibrated_theta
        self.settings = settings
        self.seed = seed

    def _settings(self) -> pl.PipelineSettings:
        if self.settings is not None:
            return self.settings
        return pl.PipelineSettings(
            window_len=self.window_len, stride=self.stride,
            horizon=self.horizon, coupling=self.coupling, lam=self.lam,
            theta_c=self.theta_c, snn_hidden=self.snn_hidden,
            t_window=self.t_window, seed=self.seed)

    def fit(self, X, y):
        X = _series(X)
        dataset = datagen.TimeSeriesDataset(
            values=X, labels=_step_labels(y, X.shape[0]), seed=self.seed)
        self.model_, self.artifacts_ = pl.train_pipeline(dataset,
                                                         self._settings())
        self.n_features_in_ = X.shape[1]
        return self

    def _windows(self, X) -> datagen.WindowSet:
        check_is_fitted(self, "model_")
        X = _series(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} channels, "
                             f"got {X.shape[1]}")
        s = self.model_.settings
        dataset = datagen.TimeSeriesDataset(
            values=X, labels=np.zeros(X.shape[0], dtype=np.int8))
        return datagen.window(dataset, s.window_len, s.stride, ())

    def _theta(self) -> float:
        if self.use_calibrated_theta and \
                self.model_.calibrated_theta is not None:
            return self.model_.calibrated_theta
        return self.model_.settings.theta_c

    def window_starts(self, X) -> np.ndarray:
        return self._windows(X).starts

    def score_samples(self, X) -> np.ndarray:
        """Anomaly score A(t) in (0, 1) per window."""
        windows = self._windows(X)
        return self.model_.score_windows(windows.inputs)

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X) - self._theta()

    def predict_proba(self, X) -> np.ndarray:
        p = self.score_samples(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return pl.classify(self.score_samples(X), self._theta()) \
            .astype(np.int64)

    def score(self, X, y) -> float:
        """Window-level accuracy against per-step labels."""
        X = _series(X)
        labels = _step_labels(y, X.shape[0])
        s = self.model_.settings
        dataset = datagen.TimeSeriesDataset(values=X, labels=labels)
        w = datagen.window(dataset, s.window_len, s.stride, ())
        preds = pl.classify(self.model_.score_windows(w.inputs),
                            self._theta())
        return float(np.mean(preds == w.labels.astype(bool)))
