"""scikit-learn compatible wrapper around the verifier network."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import average_precision_score, roc_auc_score
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted

from ..validation import check_labels, check_prefix_batch, check_threshold
from .focal import BAD, GOOD, FocalLossConfig, focal_loss
from .network import VerifierModel, backward_batch, forward, forward_batch, init_model

logger = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


class Decision(str, Enum):
    COMMIT = "commit"
    FALLBACK = "fallback"


def commit_mask(confidence, threshold: float):
    """Commit iff ``c >= threshold``; a threshold of 1 commits nothing.

    The sigmoid can round to exactly 1.0 in float64, so the top of the
    range is reserved as the "always fall back" setting.
    """
    c = np.asarray(confidence, dtype=np.float64)
    return (c >= threshold) & (threshold < 1.0)


class PrefixVerifier(ClassifierMixin, BaseEstimator):
    """Binary classifier scoring drafted prefixes; class 1 is ``good``.

    ``X`` is a sequence of draft prefixes (or labeled prefixes) or a padded
    ``(hidden, scalars, mask)`` triple. Trained with focal loss and plain
    momentum SGD over seeded mini-batches.
    """

    def __init__(
        self,
        d_model=128,
        ff_width=200,
        max_len=8,
        alpha_good=0.25,
        alpha_bad=0.75,
        gamma=2.0,
        learning_rate=0.05,
        momentum=0.9,
        epochs=30,
        batch_size=64,
        clip_norm=5.0,
        threshold=0.5,
        random_state=0,
    ):
        self.d_model = d_model
        self.ff_width = ff_width
        self.max_len = max_len
        self.alpha_good = alpha_good
        self.alpha_bad = alpha_bad
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.threshold = threshold
        self.random_state = random_state

    @property
    def focal_config(self) -> FocalLossConfig:
        return FocalLossConfig(self.alpha_good, self.alpha_bad, self.gamma)

    def fit(self, X, y=None):
        if y is None:
            y = [item.label for item in X]
        hidden, scalars, mask = check_prefix_batch(X, max_len=self.max_len)
        labels = check_labels(y, hidden.shape[0])
        if np.unique(labels).size < 2:
            raise TrainingError("training data must contain both good and bad prefixes")

        model = init_model(hidden.shape[2], self.d_model, self.ff_width, self.max_len, seed=self.random_state)
        rng = np.random.default_rng(self.random_state)
        cfg = self.focal_config
        velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
        n = hidden.shape[0]
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                # trim padding columns unused by this batch
                width = int(mask[idx].sum(axis=1).max())
                c, cache = forward_batch(model, hidden[idx, :width], scalars[idx, :width], mask[idx, :width], True)
                loss, dc = focal_loss(c, labels[idx], cfg)
                total += float(loss.sum())
                grads = backward_batch(model, cache, dc * c * (1.0 - c) / len(idx))
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if self.clip_norm and norm > self.clip_norm:
                    factor = self.clip_norm / norm
                    grads = {k: g * factor for k, g in grads.items()}
                for k, g in grads.items():
                    velocity[k] = self.momentum * velocity[k] - self.learning_rate * g
                    model.params[k] += velocity[k]
            self.loss_curve_.append(total / n)
            logger.debug("epoch %d loss %.6f", epoch, self.loss_curve_[-1])

        model.meta.update(focal=asdict(cfg), epochs=self.epochs, seed=self.random_state)
        self.model_ = model
        self.classes_ = np.array([BAD, GOOD])
        self.n_features_in_ = hidden.shape[2]
        self.n_iter_ = self.epochs
        return self

    @classmethod
    def from_model(cls, model: VerifierModel, **params) -> "PrefixVerifier":
        est = cls(d_model=model.d_model, ff_width=model.ff_width, max_len=model.max_len, **params)
        est.model_ = model
        est.classes_ = np.array([BAD, GOOD])
        est.n_features_in_ = model.hidden_dim
        return est

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        hidden, scalars, mask = check_prefix_batch(X, self.model_.hidden_dim, self.model_.max_len)
        _, cache = forward_batch(self.model_, hidden, scalars, mask, return_cache=True)
        return cache["logit"]

    def confidence(self, X) -> np.ndarray:
        return expit(self.decision_function(X))

    def predict_proba(self, X) -> np.ndarray:
        c = self.confidence(X)
        return np.column_stack([1.0 - c, c])

    def predict(self, X) -> np.ndarray:
        threshold = check_threshold(self.threshold)
        return np.where(commit_mask(self.confidence(X), threshold), GOOD, BAD)


def decide(model: VerifierModel, prefix, threshold: float) -> Decision:
    threshold = check_threshold(threshold)
    return Decision.COMMIT if commit_mask(forward(model, prefix), threshold) else Decision.FALLBACK


@dataclass
class TrainingConfig:
    d_model: int = 128
    ff_width: int = 200
    max_len: int = 8
    alpha_good: float = 0.25
    alpha_bad: float = 0.75
    gamma: float = 2.0
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 64
    holdout_fraction: float = 0.25
    seed: int = 0

    def estimator(self) -> PrefixVerifier:
        return PrefixVerifier(
            d_model=self.d_model, ff_width=self.ff_width, max_len=self.max_len,
            alpha_good=self.alpha_good, alpha_bad=self.alpha_bad, gamma=self.gamma,
            learning_rate=self.learning_rate, momentum=self.momentum, epochs=self.epochs,
            batch_size=self.batch_size, random_state=self.seed,
        )


@dataclass
class TrainingReport:
    n_train: int
    n_holdout: int
    bad_rate: float
    auroc: float
    average_precision_bad: float
    param_count: int
    seconds: float
    loss_curve: list = field(default_factory=list)
    operating_points: list = field(default_factory=list)


def ranking_metrics(confidence, labels) -> tuple[float, float]:
    """AUROC and bad-class average precision for confidences c = P(good)."""
    labels = np.asarray(labels)
    bad = (labels == BAD).astype(int)
    if bad.min() == bad.max():
        return float("nan"), float("nan")
    score_bad = 1.0 - np.asarray(confidence)
    return float(roc_auc_score(bad, score_bad)), float(average_precision_score(bad, score_bad))


def operating_points(confidence, labels, thresholds: Sequence[float]) -> list[dict]:
    """Commit rates per class and overall fallback rate at each threshold."""
    c = np.asarray(confidence, dtype=np.float64)
    y = np.asarray([int(v) for v in labels])
    rows = []
    for tau in thresholds:
        tau = check_threshold(tau)
        commit = commit_mask(c, tau)
        n_bad, n_good = int((y == BAD).sum()), int((y == GOOD).sum())
        rows.append(
            dict(
                threshold=tau,
                bad_commit=float(commit[y == BAD].sum() / n_bad) if n_bad else float("nan"),
                good_commit=float(commit[y == GOOD].sum() / n_good) if n_good else float("nan"),
                fallback=float((~commit).sum() / len(c)) if len(c) else float("nan"),
            )
        )
    return rows


def train(dataset, cfg: Optional[TrainingConfig] = None, thresholds=(0.25, 0.5, 0.75)):
    """Fit a verifier on labeled prefixes and report held-out ranking quality."""
    cfg = cfg or TrainingConfig()
    labels = np.array([int(ex.label) for ex in dataset])
    if np.unique(labels).size < 2:
        raise TrainingError("training data must contain both good and bad prefixes")
    idx = np.arange(len(dataset))
    train_idx, hold_idx = train_test_split(
        idx, test_size=cfg.holdout_fraction, random_state=cfg.seed, stratify=labels
    )
    started = time.perf_counter()
    est = cfg.estimator().fit([dataset[i] for i in train_idx], labels[train_idx])
    seconds = time.perf_counter() - started
    conf = est.confidence([dataset[i] for i in hold_idx])
    auroc, ap = ranking_metrics(conf, labels[hold_idx])
    report = TrainingReport(
        n_train=len(train_idx),
        n_holdout=len(hold_idx),
        bad_rate=float((labels == BAD).mean()),
        auroc=auroc,
        average_precision_bad=ap,
        param_count=est.model_.param_count,
        seconds=seconds,
        loss_curve=list(est.loss_curve_),
        operating_points=operating_points(conf, labels[hold_idx], thresholds),
    )
    logger.info("trained verifier: %d params, holdout AUROC %.4f", report.param_count, auroc)
    return est.model_, report
