"""scikit-learn style wrappers: spectrogram extraction, scaling and a searched classifier.

Inputs are lists because utterances differ in length: waveforms for
:class:`SpectrogramExtractor`, ``[frames, bins]`` arrays for the rest.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted

from . import audio
from .autodiff import precision
from .harness import FoldData, parse_config, search
from .search_space import architecture_document
from .strategies import SegmentData, UtteranceData, predict_proba


def check_spectrogram_list(X, n_bins=None, name="X"):
    """Validate a sequence of 2-D ``[frames, bins]`` arrays; returns a list of float64 arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    if isinstance(X, np.ndarray) or not hasattr(X, "__len__"):
        raise ValueError(f"{name} must be a list of 2-D spectrograms or a 3-D array")
    if len(X) == 0:
        raise ValueError(f"{name} is empty")
    out = []
    for i, x in enumerate(X):
        x = np.asarray(x.values if isinstance(x, audio.Spectrogram) else x, dtype=np.float64)
        if x.ndim != 2 or 0 in x.shape:
            raise ValueError(f"{name}[{i}] has shape {x.shape}; expected [frames, bins]")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"{name}[{i}] contains non-finite values")
        if n_bins is not None and x.shape[1] != n_bins:
            raise ValueError(f"{name}[{i}] has {x.shape[1]} bins, expected {n_bins}")
        out.append(x)
    widths = {x.shape[1] for x in out}
    if len(widths) != 1:
        raise ValueError(f"{name} mixes bin counts {sorted(widths)}")
    return out


class SpectrogramExtractor(TransformerMixin, BaseEstimator):
    """Waveforms (``Utterance`` objects or 1-D arrays at ``sample_rate``) to log spectrograms."""

    def __init__(self, sample_rate=16000, window_ms=40.0, shift_ms=10.0, dft_len=1600,
                 max_freq_hz=4000.0, log=True):
        self.sample_rate = sample_rate
        self.window_ms = window_ms
        self.shift_ms = shift_ms
        self.dft_len = dft_len
        self.max_freq_hz = max_freq_hz
        self.log = log

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = []
        for x in X:
            u = x if isinstance(x, audio.Utterance) else audio.Utterance(
                np.asarray(x, dtype=np.float64), self.sample_rate, 0, "", "")
            spec = audio.stft_spectrogram(u, self.window_ms, self.shift_ms, self.dft_len,
                                          self.max_freq_hz, self.log)
            out.append(spec.values)
        return out


class SpectrogramScaler(TransformerMixin, BaseEstimator):
    """Per-bin standardisation with statistics pooled over every frame seen in ``fit``."""

    def fit(self, X, y=None):
        X = check_spectrogram_list(X)
        self.stats_ = audio.fit_stats(X)
        self.n_bins_ = X[0].shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        X = check_spectrogram_list(X, self.n_bins_)
        return [audio.normalize(x, self.stats_) for x in X]


class NASEmotionClassifier(ClassifierMixin, BaseEstimator):
    """Architecture search plus retraining on normalised spectrograms.

    ``fit`` cuts the training spectrograms into fixed-length segments, holds
    out ``val_fraction`` of the utterances for the architecture step and
    checkpoint selection, searches with ``strategy`` and retrains the derived
    network.  Prediction runs on whole spectrograms.
    """

    def __init__(self, family="cnn_rnn_att", layers=None, strategy="dropout", k=1,
                 search_epochs=60, retrain_epochs=20, batch_size=16, segment_frames=200,
                 val_fraction=0.2, random_candidates=5, probe_every=10, random_state=0,
                 precision=32):
        self.family = family
        self.layers = layers
        self.strategy = strategy
        self.k = k
        self.search_epochs = search_epochs
        self.retrain_epochs = retrain_epochs
        self.batch_size = batch_size
        self.segment_frames = segment_frames
        self.val_fraction = val_fraction
        self.random_candidates = random_candidates
        self.probe_every = probe_every
        self.random_state = random_state
        self.precision = precision

    def _config(self, n_bins, n_classes):
        return parse_config({
            "family": "custom" if self.layers is not None else self.family,
            "layers": self.layers,
            "strategy": self.strategy,
            "k": self.k,
            "search_epochs": self.search_epochs,
            "retrain_epochs": self.retrain_epochs,
            "batch_size": self.batch_size,
            "random_candidates": self.random_candidates,
            "probe_every": self.probe_every,
            "seeds": [self.random_state],
            "precision": self.precision,
            "n_classes": n_classes,
            # the data block only shapes validation of the search space
            "data": {"segment_seconds": self.segment_frames / 100.0, "shift_ms": 10.0,
                     "dft_len": 2 * (n_bins - 1), "max_freq_hz": None,
                     "sample_rate": 16000},
        })

    def _segments(self, X, y, dtype):
        pieces, labels = [], []
        for x, label in zip(X, y):
            spec = audio.Spectrogram(x, 0.01, label=label)
            for p in audio.segment(spec, self.segment_frames / 100.0):
                pieces.append(p.values)
                labels.append(label)
        if not pieces:
            raise ValueError(f"no spectrogram is long enough for a {self.segment_frames}-frame segment")
        return SegmentData(np.stack(pieces).astype(dtype), np.array(labels))

    def fit(self, X, y):
        X = check_spectrogram_list(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y has shape {y.shape}; expected ({len(X)},)")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_bins_ = X[0].shape[1]
        self.n_features_in_ = self.n_bins_
        cfg = self._config(self.n_bins_, len(self.classes_))
        idx = np.arange(len(X))
        tr, va = train_test_split(idx, test_size=self.val_fraction, stratify=y_idx,
                                  random_state=self.random_state)
        dtype = np.float64 if self.precision == 64 else np.float32
        with precision(self.precision):
            data = FoldData(
                self._segments([X[i] for i in tr], y_idx[tr], dtype),
                self._segments([X[i] for i in va], y_idx[va], dtype),
                UtteranceData([X[i].astype(dtype) for i in va], y_idx[va]),
                UtteranceData([], np.zeros(0, int)),
                "",
            )
            net, arch, model, ckpt, logs = search(cfg, data, self.random_state)
        self.supernet_, self.architecture_, self.model_ = net, arch, model
        self.checkpoint_, self.logs_ = ckpt, logs
        self.architecture_document_ = architecture_document(net, arch)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_spectrogram_list(X, self.n_bins_)
        with precision(self.precision):
            return predict_proba(self.model_, X)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
