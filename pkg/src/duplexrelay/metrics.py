"""Latency formulas, nearest-rank percentiles, event scoring and session reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from .timeline import ControlToken

SCHEMA_VERSION = 1

MODES = ("s2s_only", "cascaded", "commit", "fallback")
REQUIRED = {
    "s2s_only": ("t_generate",),
    "cascaded": ("t_asr", "t_generate"),
    "commit": ("t_generate", "t_verifier"),
    "fallback": ("t_asr", "t_generate"),
}
SCORED_TOKENS = (ControlToken.BOS, ControlToken.BOC, ControlToken.STP, ControlToken.EOS)


class SpecificationError(ValueError):
    """A latency was requested without the components its formula needs."""


@dataclass(frozen=True)
class TurnLatency:
    mode: str
    components: dict
    total: float

    def to_dict(self) -> dict:
        return dict(mode=self.mode, components=dict(sorted(self.components.items())), total=self.total)


def latency(mode: str, components: dict) -> TurnLatency:
    """Onset latency of one turn under ``mode``.

    commit adds the verifier to the draft's generation time; fallback is
    priced exactly like the cascaded pipeline.
    """
    if mode not in REQUIRED:
        raise SpecificationError(f"unknown latency mode {mode!r}")
    missing = [k for k in REQUIRED[mode] if components.get(k) is None]
    if missing:
        raise SpecificationError(f"{mode} latency needs {', '.join(missing)}")
    total = 0.0
    for k in REQUIRED[mode]:
        total += float(components[k])
    return TurnLatency(mode, {k: float(v) for k, v in components.items() if v is not None}, total)


def percentile(samples: Iterable[float], q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest sample."""
    values = sorted(samples)
    if not values:
        raise ValueError("percentile of an empty sample")
    if not 0 < q <= 100:
        raise ValueError("q must lie in (0, 100]")
    rank = -((-Fraction(q) * len(values)) // 100)
    return values[max(int(rank), 1) - 1]


def p90(samples: Iterable[float]) -> float:
    return percentile(samples, 90)


# -- event scoring -----------------------------------------------------------------


@dataclass(frozen=True)
class TypeScore:
    precision: float
    recall: float
    f1: float
    n_predicted: int
    n_reference: int
    matches: tuple  # (predicted tick, reference tick, offset)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["matches"] = [list(m) for m in self.matches]
        return d


@dataclass(frozen=True)
class EventMatchReport:
    tolerance_frames: int
    per_type: dict  # token value -> TypeScore

    def to_dict(self) -> dict:
        return dict(tolerance_frames=self.tolerance_frames, per_type={k: v.to_dict() for k, v in sorted(self.per_type.items())})


def _prf(matched: int, n_pred: int, n_ref: int) -> tuple[float, float, float]:
    p = matched / n_pred if n_pred else 0.0
    r = matched / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def match_ticks(predicted: Sequence[int], reference: Sequence[int], tolerance: int) -> list[tuple[int, int]]:
    """One-to-one matching of maximum cardinality within ``tolerance``.

    References are visited in tick order and each takes the earliest
    unmatched prediction inside its window. With equal-width windows this
    exchange-argument greedy is optimal.
    """
    preds = sorted(predicted)
    used = [False] * len(preds)
    out = []
    lo = 0
    for r in sorted(reference):
        while lo < len(preds) and (used[lo] or preds[lo] < r - tolerance):
            lo += 1
        j = lo
        while j < len(preds) and used[j]:
            j += 1
        if j < len(preds) and preds[j] <= r + tolerance:
            used[j] = True
            out.append((preds[j], r))
    return out


def score_events(predicted, reference, tolerance_frames: int = 1, types: Optional[Sequence] = None) -> EventMatchReport:
    """Per-type precision, recall and F1 for (tick, token) event lists.

    SIL and PAUSE are not events and are ignored.
    """
    if tolerance_frames < 0:
        raise ValueError("tolerance must be non-negative")
    tokens = [ControlToken(t) for t in types] if types is not None else None
    pred = [(int(t), ControlToken(tok)) for t, tok in predicted]
    ref = [(int(t), ControlToken(tok)) for t, tok in reference]
    present = {tok for _, tok in pred + ref if tok in SCORED_TOKENS}
    per_type = {}
    for tok in tokens if tokens is not None else [t for t in SCORED_TOKENS if t in present]:
        p = [t for t, x in pred if x == tok]
        r = [t for t, x in ref if x == tok]
        pairs = match_ticks(p, r, tolerance_frames)
        prec, rec, f1 = _prf(len(pairs), len(p), len(r))
        per_type[tok.value] = TypeScore(prec, rec, f1, len(p), len(r), tuple((a, b, a - b) for a, b in pairs))
    return EventMatchReport(int(tolerance_frames), per_type)


# -- session reports ---------------------------------------------------------------


@dataclass
class TurnRecord:
    """Everything the harness observed for one agent turn."""

    script_id: str
    turn_id: str
    kind: str  # "response" or "backchannel"
    outcome: str  # commit, fallback, cascaded, s2s_only, failed, backchannel
    fork_tick: int
    latency: Optional[TurnLatency] = None
    onset_ms: Optional[float] = None  # absolute time of the first audio
    words: tuple = ()
    intervals: list = field(default_factory=list)
    gaps: list = field(default_factory=list)
    truncated_at_ms: Optional[float] = None
    prefix_words: tuple = ()
    confidence: Optional[float] = None
    label: Optional[int] = None  # oracle label of the drafted prefix, 1 = good
    relay_margin_ms: Optional[float] = None
    error: Optional[str] = None
    discarded_after_stp: int = 0

    @property
    def seamless(self) -> bool:
        return not self.gaps

    def output_dict(self) -> dict:
        return dict(
            turn_id=self.turn_id,
            kind=self.kind,
            fork_tick=self.fork_tick,
            onset_latency_ms=self.latency.total if self.latency else None,
            onset_ms=self.onset_ms,
            words=list(self.words),
            intervals=self.intervals,
            gaps=[list(g) for g in self.gaps],
            seamless=self.seamless,
            truncated_at_ms=self.truncated_at_ms,
            failed=self.outcome == "failed",
        )

    def decision_dict(self) -> dict:
        return dict(
            turn_id=self.turn_id,
            outcome=self.outcome,
            latency=self.latency.to_dict() if self.latency else None,
            prefix_words=list(self.prefix_words),
            confidence=self.confidence,
            label=None if self.label is None else ("good" if self.label else "bad"),
            relay_margin_ms=self.relay_margin_ms,
            error=self.error,
            discarded_after_stp=self.discarded_after_stp,
        )


@dataclass
class SessionLog:
    system: str
    turns: list = field(default_factory=list)
    predicted_events: dict = field(default_factory=dict)  # script_id -> [(tick, token)]
    reference_events: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)


def _rate(num: int, den: int) -> Optional[float]:
    return num / den if den else None


@dataclass
class SessionReport:
    schema_version: int
    outputs: dict
    decisions: dict

    def to_dict(self) -> dict:
        return dict(schema_version=self.schema_version, outputs=self.outputs, decisions=self.decisions)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def outputs_text(self) -> str:
        """Serialized output section only; what a listener would observe."""
        return json.dumps(self.outputs, sort_keys=True, indent=2) + "\n"

    @property
    def summary(self) -> dict:
        return self.decisions["summary"]


def session_report(log: SessionLog, quality_labels: Optional[dict] = None, tolerance_frames: int = 1) -> SessionReport:
    """Aggregate a finished session into its serializable report.

    Rates follow the operating-point convention: bad-commit is the share
    of bad prefixes that were committed, good-commit the share of good
    prefixes committed, fallback the share of gated turns sent to the
    cascaded path. Quality statistics come only from supplied labels.
    """
    responses = [t for t in log.turns if t.kind == "response"]
    onsets = [t.latency.total for t in responses if t.latency is not None]
    gated = [t for t in responses if t.outcome in ("commit", "fallback")]
    commits = [t for t in gated if t.outcome == "commit"]
    labeled = [t for t in gated if t.label is not None]
    bad = [t for t in labeled if t.label == 0]
    good = [t for t in labeled if t.label == 1]

    scores = {}
    totals = {}
    for sid in sorted(set(log.predicted_events) | set(log.reference_events)):
        rep = score_events(log.predicted_events.get(sid, []), log.reference_events.get(sid, []), tolerance_frames)
        scores[sid] = rep.to_dict()
        for tok, ts in rep.per_type.items():
            acc = totals.setdefault(tok, [0, 0, 0])
            acc[0] += len(ts.matches)
            acc[1] += ts.n_predicted
            acc[2] += ts.n_reference
    pooled = {}
    for tok, (m, n_p, n_r) in sorted(totals.items()):
        prec, rec, f1 = _prf(m, n_p, n_r)
        pooled[tok] = dict(precision=prec, recall=rec, f1=f1, n_predicted=n_p, n_reference=n_r, matched=m)

    by_outcome = {}
    for name in sorted({t.outcome for t in responses if t.latency is not None}):
        vals = [t.latency.total for t in responses if t.outcome == name and t.latency is not None]
        by_outcome[name] = p90(vals)

    quality = None
    if quality_labels:
        qs = [float(quality_labels[t.turn_id]) for t in responses if t.turn_id in quality_labels]
        quality = dict(
            n=len(qs),
            average=sum(qs) / len(qs) if qs else None,
            low_quality_rate=_rate(sum(1 for q in qs if q <= 3), len(qs)),
        )

    outputs = dict(
        turns=[t.output_dict() for t in log.turns],
        predicted_events={sid: [[t, ControlToken(tok).value] for t, tok in ev] for sid, ev in sorted(log.predicted_events.items())},
        event_scores=scores,
        pooled_event_scores=pooled,
        p90_onset_ms=p90(onsets) if onsets else None,
        n_turns=len(responses),
        n_failed=sum(1 for t in responses if t.outcome == "failed"),
        seamless_rate=_rate(sum(1 for t in responses if t.words and t.seamless), sum(1 for t in responses if t.words)),
    )
    margins = [t.relay_margin_ms for t in commits if t.relay_margin_ms is not None]
    summary = dict(
        system=log.system,
        n_gated=len(gated),
        commit_rate=_rate(len(commits), len(gated)),
        fallback_rate=_rate(len(gated) - len(commits), len(gated)),
        bad_commit_rate=_rate(sum(1 for t in bad if t.outcome == "commit"), len(bad)),
        good_commit_rate=_rate(sum(1 for t in good if t.outcome == "commit"), len(good)),
        ungated_bad_rate=_rate(len(bad), len(labeled)),
        p90_by_outcome=by_outcome,
        relay_margins_ms=margins,
        min_relay_margin_ms=min(margins) if margins else None,
        quality=quality,
        discarded_after_stp=sum(t.discarded_after_stp for t in log.turns),
    )
    decisions = dict(summary=summary, turns=[t.decision_dict() for t in log.turns], config=log.config)
    return SessionReport(SCHEMA_VERSION, outputs, decisions)

