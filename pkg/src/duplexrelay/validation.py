"""Input validation shared by the estimator and the runtime entry points."""
from __future__ import annotations

import numbers

import numpy as np


def check_threshold(threshold) -> float:
    if not isinstance(threshold, numbers.Real) or isinstance(threshold, bool):
        raise TypeError(f"threshold must be a real number, got {type(threshold).__name__}")
    value = float(threshold)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {value}")
    return value


def check_prefix_len(prefix_len, max_len: int) -> int:
    value = int(prefix_len)
    if value != prefix_len or not 1 <= value <= max_len:
        raise ValueError(f"prefix_len must be an integer in [1, {max_len}], got {prefix_len}")
    return value


def _as_prefix(item):
    # LabeledPrefix wraps a DraftPrefix
    return getattr(item, "prefix", item)


def check_prefix_batch(X, hidden_dim=None, max_len=None):
    """Normalise ``X`` to padded ``(hidden, scalars, mask)`` arrays.

    ``X`` may be a sequence of draft prefixes (or labeled prefixes), or an
    already padded triple.
    """
    from .verifier.network import pad_prefixes

    if isinstance(X, tuple) and len(X) == 3 and isinstance(X[0], np.ndarray):
        hidden, scalars, mask = (np.asarray(a) for a in X)
        mask = mask.astype(bool)
        if hidden.ndim != 3 or scalars.shape != hidden.shape[:2] + (3,) or mask.shape != hidden.shape[:2]:
            raise ValueError("padded input must be (B, n, d), (B, n, 3), (B, n)")
    else:
        items = [_as_prefix(x) for x in X]
        if not items:
            raise ValueError("empty input")
        hidden, scalars, mask = pad_prefixes(items)
    if not np.all(mask.any(axis=1)):
        raise ValueError("every sequence needs at least one valid position")
    if not (np.all(np.isfinite(hidden)) and np.all(np.isfinite(scalars))):
        raise ValueError("input contains NaN or infinity")
    if hidden_dim is not None and hidden.shape[2] != hidden_dim:
        raise ValueError(f"X has hidden dimension {hidden.shape[2]}, estimator expects {hidden_dim}")
    if max_len is not None and hidden.shape[1] > max_len:
        raise ValueError(f"prefix length {hidden.shape[1]} exceeds max_len {max_len}")
    return hidden, scalars, mask


def check_labels(y, n_samples: int) -> np.ndarray:
    from .verifier.focal import as_label

    labels = np.array([as_label(v) for v in y], dtype=np.int64)
    if labels.shape[0] != n_samples:
        raise ValueError(f"got {labels.shape[0]} labels for {n_samples} samples")
    return labels
