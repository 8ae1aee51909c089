"""Differentiable architecture search for speech emotion recognition.

Modules: ``autodiff`` (tensors, tape, Adam), ``ops`` (conv, pooling, GRU,
attention, capsules), ``search_space`` (supernets and path masks),
``strategies`` (joint, sampling, dropout, random search), ``audio``
(spectrograms and corpora), ``harness`` (configs, folds, reports),
``estimators`` (scikit-learn wrappers) and ``cli``.
"""

from .estimators import NASEmotionClassifier, SpectrogramExtractor, SpectrogramScaler
from .harness import parse_config, run_experiment
from .search_space import Supernet, build_supernet, count_params, derive_architecture

__version__ = "0.1.0"

__all__ = [
    "NASEmotionClassifier",
    "SpectrogramExtractor",
    "SpectrogramScaler",
    "Supernet",
    "build_supernet",
    "count_params",
    "derive_architecture",
    "parse_config",
    "run_experiment",
]
