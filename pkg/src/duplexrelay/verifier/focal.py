"""Class-weighted focal loss on the verifier confidence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GOOD, BAD = 1, 0
CLAMP_EPS = 1e-12


@dataclass(frozen=True)
class FocalLossConfig:
    alpha_good: float = 0.25
    alpha_bad: float = 0.75
    gamma: float = 2.0

    def __post_init__(self):
        if self.alpha_good <= 0 or self.alpha_bad <= 0:
            raise ValueError("class weights must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


def as_label(label) -> int:
    if isinstance(label, str):
        key = label.strip().lower()
        if key not in ("good", "bad"):
            raise ValueError(f"unknown label {label!r}")
        return GOOD if key == "good" else BAD
    value = int(label)
    if value not in (GOOD, BAD):
        raise ValueError(f"unknown label {label!r}")
    return value


def focal_loss(c, label, cfg: FocalLossConfig = FocalLossConfig()):
    """Loss and d(loss)/dc for confidence ``c`` = P(good).

    ``p_t`` is ``c`` for good examples and ``1 - c`` for bad ones. The
    confidence is clamped to ``[eps, 1 - eps]`` before taking logs, and the
    gradient is evaluated at the clamped point. Works elementwise on arrays.
    """
    scalar = np.ndim(c) == 0 and np.ndim(label) == 0
    c = np.clip(np.asarray(c, dtype=np.float64), CLAMP_EPS, 1.0 - CLAMP_EPS)
    if np.ndim(label) == 0:
        y = np.full(c.shape, as_label(label))
    else:
        y = np.array([as_label(v) for v in np.ravel(label)]).reshape(np.shape(label))
    good = y == GOOD
    p_t = np.where(good, c, 1.0 - c)
    alpha = np.where(good, cfg.alpha_good, cfg.alpha_bad)
    g = cfg.gamma
    log_p = np.log(p_t)
    one_minus = 1.0 - p_t
    loss = -alpha * one_minus**g * log_p
    if g == 0:
        dl_dp = -alpha / p_t
    else:
        dl_dp = alpha * (g * one_minus ** (g - 1) * log_p - one_minus**g / p_t)
    grad = np.where(good, dl_dp, -dl_dp)
    if scalar:
        return float(loss), float(grad)
    return loss, grad
