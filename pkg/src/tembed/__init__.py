"""Sinusoidal time embeddings and a supervised-learning harness for
irregularly sampled multivariate time series.

The public surface is organized by stage: ``encoding`` (timestamp
embeddings, shift maps, delta recovery), ``dataset`` (irregular series,
normalization, binning, feature attachment, splits), ``benchgen``
(synthetic timing benchmark), ``models`` (linear, MLP, LSTM, and
self-attentive LSTM with exact gradients), ``training`` (optimizer,
cross-validation protocol, dropout sweeps), ``metrics`` (ranking and
error scores), and ``cli`` (the ``tembed`` command).
"""

from .encoding import (
    AliasingWarning,
    DeltaAmbiguityError,
    EncoderConfig,
    InvalidEmbeddingError,
    ShiftMap,
    delta_range,
    estimate_delta,
    pe,
    shift_map,
    te,
    te_batch,
)

__all__ = [
    "AliasingWarning",
    "DeltaAmbiguityError",
    "EncoderConfig",
    "InvalidEmbeddingError",
    "ShiftMap",
    "delta_range",
    "estimate_delta",
    "pe",
    "shift_map",
    "te",
    "te_batch",
]

__version__ = "0.1.0"
