"""Per-token calibration features for drafted words."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MARGIN_CAP = 30.0


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class ScalarFeatures:
    entropy: float
    log_prob: float
    margin: float
    flagged: bool = False  # selected token was not the argmax; margin is negative

    def as_array(self) -> np.ndarray:
        return np.array([self.entropy, self.log_prob, self.margin])


def compute_scalar_features(distribution, selected_index: int, margin_cap: float = MARGIN_CAP) -> ScalarFeatures:
    """Entropy (nats), selected-token log-probability, and top-two log margin.

    When the selected token is not the most probable one, the margin is
    measured against the global maximum instead, which makes it negative;
    such results carry ``flagged=True``.
    """
    p = np.asarray(distribution, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("distribution must be a vector with at least two entries")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"not a probability vector (sum={p.sum():.9f})")
    sel = int(selected_index)
    if p[sel] <= 0:
        raise DegenerateInputError(f"selected entry {sel} has zero probability")

    nz = p[p > 0]
    entropy = max(0.0, float(-np.sum(nz * np.log(nz))))
    log_prob = math.log(p[sel])
    others = np.delete(p, sel)
    runner_up = float(others.max())
    if p[sel] >= runner_up:
        margin = log_prob - math.log(runner_up) if runner_up > 0 else math.inf
        return ScalarFeatures(entropy, log_prob, min(margin, margin_cap))
    return ScalarFeatures(entropy, log_prob, log_prob - math.log(runner_up), flagged=True)
