"""Shared response buffer and the chunk-gated TTS timing model.

No audio is produced. A chunk of at most ``min_chunk_words`` words starts
playing at ``max(ready time, end of previous interval)`` and lasts
``words * word_duration_ms``. Fast-path words form their own chunks (the
committed prefix is complete at commit time); slow-path words accumulate
across arrivals until ``min_chunk_words`` are available, and a trailing
partial chunk is flushed when the last word arrives.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

logger = logging.getLogger(__name__)

FAST, SLOW = "fast", "slow"


@dataclass(frozen=True)
class Segment:
    source: str
    words: tuple[str, ...]
    available_ms: float


class BufferOrderError(RuntimeError):
    pass


@dataclass
class ResponseBuffer:
    segments: list = field(default_factory=list)
    truncated_at: Optional[float] = None
    warnings: list = field(default_factory=list)
    rejected: list = field(default_factory=list)

    def append(self, source: str, words, available_ms: float) -> bool:
        """Add a segment; returns False if the buffer was already truncated."""
        if source not in (FAST, SLOW):
            raise ValueError(f"unknown source {source!r}")
        words = tuple(words)
        if self.truncated_at is not None:
            self.rejected.append(Segment(source, words, available_ms))
            return False
        if source == FAST and self.segments:
            raise BufferOrderError("the fast segment must precede all slow segments and appear once")
        self.segments.append(Segment(source, words, float(available_ms)))
        return True

    def add_fast(self, words, available_ms: float) -> bool:
        return self.append(FAST, words, available_ms)

    def add_slow(self, words, available_ms: float) -> bool:
        return self.append(SLOW, words, available_ms)

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(w for s in self.segments for w in s.words)

    def copy(self) -> "ResponseBuffer":
        return ResponseBuffer(list(self.segments), self.truncated_at, list(self.warnings), list(self.rejected))


@dataclass(frozen=True)
class TtsSinkModel:
    min_chunk_words: int = 5
    word_duration_ms: float = 400.0

    def __post_init__(self):
        if self.min_chunk_words < 1:
            raise ValueError("min_chunk_words must be >= 1")
        if self.word_duration_ms <= 0:
            raise ValueError("word_duration_ms must be positive")


@dataclass(frozen=True)
class Interval:
    start_ms: float
    end_ms: float
    words: tuple[str, ...]
    source: str


@dataclass
class AudioTimeline:
    intervals: list = field(default_factory=list)
    gaps: list = field(default_factory=list)

    @property
    def seamless(self) -> bool:
        return not self.gaps

    @property
    def onset_ms(self) -> Optional[float]:
        return self.intervals[0].start_ms if self.intervals else None

    @property
    def end_ms(self) -> Optional[float]:
        return self.intervals[-1].end_ms if self.intervals else None

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(w for iv in self.intervals for w in iv.words)

    def word_starts(self, word_duration_ms: float) -> list[tuple[float, str]]:
        out = []
        for iv in self.intervals:
            for i, w in enumerate(iv.words):
                out.append((iv.start_ms + i * word_duration_ms, w))
        return out

    def to_records(self) -> list[dict]:
        return [dict(start_ms=iv.start_ms, end_ms=iv.end_ms, words=list(iv.words), source=iv.source) for iv in self.intervals]

    def dumps(self) -> str:
        """JSON-lines export, one interval per line."""
        return "".join(json.dumps(r) + "\n" for r in self.to_records())


def _chunks(buffer: ResponseBuffer, sink: TtsSinkModel):
    """(ready_ms, words, source) per chunk, in buffer order."""
    C = sink.min_chunk_words
    out = []
    slow_words = []  # (word, available)
    for seg in buffer.segments:
        if seg.source == FAST:
            for i in range(0, len(seg.words), C):
                out.append((seg.available_ms, seg.words[i : i + C], FAST))
        else:
            slow_words.extend((w, seg.available_ms) for w in seg.words)
    for i in range(0, len(slow_words), C):
        part = slow_words[i : i + C]
        # a full chunk waits for its C-th word, a trailing partial for its last
        out.append((part[-1][1], tuple(w for w, _ in part), SLOW))
    return out


def drain(buffer: ResponseBuffer, sink: TtsSinkModel = TtsSinkModel()) -> AudioTimeline:
    timeline = AudioTimeline()
    prev_end = None
    wd = sink.word_duration_ms
    cut = buffer.truncated_at
    for ready, words, source in _chunks(buffer, sink):
        start = ready if prev_end is None else max(ready, prev_end)
        if cut is not None:
            kept = tuple(w for i, w in enumerate(words) if start + i * wd < cut)
            if not kept:
                break
            end = min(start + len(words) * wd, cut)
            words = kept
        else:
            end = start + len(words) * wd
        if prev_end is not None and start > prev_end:
            timeline.gaps.append((prev_end, start))
        timeline.intervals.append(Interval(start, end, words, source))
        prev_end = end
        if cut is not None and end >= cut:
            break
    return timeline


def relay_margin(prefix_words: int, prefix_onset_ms: float, word_duration_ms: float, slow_first_chunk_ms: float) -> float:
    """Prefix audio duration minus the slow path's lead time past prefix onset."""
    return prefix_words * word_duration_ms - (slow_first_chunk_ms - prefix_onset_ms)


def truncate_on_stp(
    buffer: ResponseBuffer,
    stp_time_ms: float,
    sink: TtsSinkModel = TtsSinkModel(),
    utterance_active: Optional[bool] = None,
) -> ResponseBuffer:
    """Cut playback at ``stp_time_ms``; words that would start at or after it are dropped.

    Returns a new buffer. An STP after the utterance has finished playing
    is a no-op recorded in ``warnings``. Callers that know more output is
    still on its way pass ``utterance_active=True``.
    """
    out = buffer.copy()
    if out.truncated_at is not None:
        out.warnings.append(f"STP at {stp_time_ms} ms ignored: already truncated at {out.truncated_at} ms")
        return out
    timeline = drain(out, sink)
    finished = bool(timeline.intervals) and stp_time_ms >= timeline.end_ms
    if utterance_active is False or (utterance_active is None and finished):
        msg = f"STP at {stp_time_ms} ms after utterance end at {timeline.end_ms} ms"
        logger.warning(msg)
        out.warnings.append(msg)
        return out
    return replace(out, truncated_at=float(stp_time_ms))
