"""scikit-learn style wrappers around the encoder, the operating-point search and the stager.

Recordings are passed as sequences of 1-D arrays sampled at ``fs``; per-epoch
labels as sequences of integer arrays, one per recording.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import network as net
from .corpus import LabeledSequence
from .encoder import EncoderConfig, encode_ramsdm
from .exceptions import FormatError, ParameterError
from .network import ModelConfig
from .operating_point import FidelityThresholds, SweepGrid, grid_search
from .s2e import build_epoch_batch, dense_epoch_batch
from .signal_io import Recording, bandpass
from .training import TrainConfig, predict_sequence, train


def check_signal(x, name: str = "signal") -> np.ndarray:
    """1-D, non-empty, finite float64 copy of ``x``."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ParameterError(f"{name} must be a non-empty 1-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise FormatError(f"{name} contains non-finite samples")
    return a


def check_signals(X) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 1:
        X = [X]
    out = [check_signal(x, f"signal {i}") for i, x in enumerate(X)]
    if not out:
        raise ParameterError("need at least one signal")
    return out


def check_labels(y, X) -> list[np.ndarray]:
    if len(y) != len(X):
        raise ParameterError(f"{len(y)} label arrays for {len(X)} recordings")
    out = []
    for i, lab in enumerate(y):
        a = np.asarray(lab, dtype=np.int64)
        if a.ndim != 1 or (a.size and (a.min() < 0 or a.max() >= net.N_CLASSES)):
            raise FormatError(f"labels of recording {i} must be 1-D stage codes in 0..4")
        out.append(a)
    return out


class EventEncoder(TransformerMixin, BaseEstimator):
    """Signals -> multi-scale event streams. Stateless; ``fit`` only validates."""

    def __init__(self, k_slow=1.6, k_fast=1.0, sigma_window=100, fs=100.0, filter=True):
        self.k_slow = k_slow
        self.k_fast = k_fast
        self.sigma_window = sigma_window
        self.fs = fs
        self.filter = filter

    def _config(self) -> EncoderConfig:
        return EncoderConfig(k_slow=self.k_slow, k_fast=self.k_fast, sigma_window=self.sigma_window)

    def fit(self, X, y=None):
        self._config()
        check_signals(X)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        cfg = self._config()
        out = []
        for x in check_signals(X):
            if self.filter:
                x = bandpass(Recording(x, self.fs)).samples
            out.append(encode_ramsdm(x, cfg, self.fs))
        return out


class OperatingPointSearch(BaseEstimator):
    """Constrained grid search; ``selected_`` is None when nothing is feasible."""

    def __init__(self, k_values=None, tau_snr=8.0, tau_nmse=0.16, tau_corr=0.90, fs=100.0):
        self.k_values = k_values
        self.tau_snr = tau_snr
        self.tau_nmse = tau_nmse
        self.tau_corr = tau_corr
        self.fs = fs

    def fit(self, X, y=None):
        grid = SweepGrid() if self.k_values is None else SweepGrid(tuple(self.k_values))
        thr = FidelityThresholds(self.tau_snr, self.tau_nmse, self.tau_corr)
        res = grid_search(check_signals(X), grid, thr, fs=self.fs)
        self.table_ = res.table
        self.selected_ = res.selected
        return self

    def encoder(self) -> EventEncoder:
        check_is_fitted(self, "selected_")
        if self.selected_ is None:
            raise ParameterError("no feasible operating point")
        return EventEncoder(self.selected_.k_slow, self.selected_.k_fast, fs=self.fs)


class SleepStager(ClassifierMixin, BaseEstimator):
    """Per-epoch stage classifier over whole recordings.

    ``fit(X, y)`` holds out ``ceil(val_fraction * n)`` recordings for early
    stopping; ``predict(X)`` returns one label array per recording.
    """

    def __init__(
        self,
        profile="desk",
        k_slow=1.6,
        k_fast=1.0,
        fs=100.0,
        dense_input=False,
        single_branch=False,
        no_elif=False,
        lr=1e-3,
        weight_decay=1e-4,
        batch_size=64,
        max_epochs=50,
        patience=8,
        val_fraction=0.15,
        random_state=0,
    ):
        self.profile = profile
        self.k_slow = k_slow
        self.k_fast = k_fast
        self.fs = fs
        self.dense_input = dense_input
        self.single_branch = single_branch
        self.no_elif = no_elif
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig.from_profile(
            self.profile, dense_input=self.dense_input, single_branch=self.single_branch, no_elif=self.no_elif
        )

    def _batches(self, X):
        enc = EncoderConfig(k_slow=self.k_slow, k_fast=self.k_fast)
        out = []
        for x in check_signals(X):
            xf = bandpass(Recording(x, self.fs)).samples
            if self.dense_input:
                out.append(dense_epoch_batch(xf, self.fs))
            else:
                out.append(build_epoch_batch(encode_ramsdm(xf, enc, self.fs)))
        return out

    def fit(self, X, y):
        X = check_signals(X)
        y = check_labels(y, X)
        if len(X) < 2:
            raise ParameterError("need at least two recordings (one for validation)")
        seqs = []
        for i, (b, lab) in enumerate(zip(self._batches(X), y)):
            if lab.size != len(b):
                raise ParameterError(f"recording {i}: {lab.size} labels for {len(b)} epochs")
            seqs.append(LabeledSequence(str(i), b, lab))
        rng = np.random.default_rng(self.random_state)
        order = rng.permutation(len(seqs))
        n_val = max(1, math.ceil(self.val_fraction * len(seqs)))
        val = [seqs[i] for i in order[:n_val]]
        tr = [seqs[i] for i in order[n_val:]]
        tcfg = TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=min(self.patience, self.max_epochs),
            seed=self.random_state,
        )
        self.config_ = self._model_config()
        res = train(tr, val, self.config_, tcfg)
        self.params_ = res.params
        self.history_ = res.history
        self.classes_ = np.arange(net.N_CLASSES)
        return self

    def predict_proba(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "params_")
        return [predict_sequence(self.params_, self.config_, b) for b in self._batches(X)]

    def predict(self, X) -> list[np.ndarray]:
        return [p.argmax(axis=1) for p in self.predict_proba(X)]

    def score(self, X, y, sample_weight=None) -> float:
        pred = np.concatenate(self.predict(X))
        true = np.concatenate(check_labels(y, check_signals(X)))
        return float(np.mean(pred == true))
