"""Duplex controller and forked speculative drafting.

The controller is a tick-synchronous automaton emitting exactly one control
token per tick. On response initiation the caller forks it: the main stream
keeps consuming live user events while a detached speculative stream drafts
the response prefix from a frozen snapshot of the context.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .timeline import TICK_MS, ControlToken, is_word

DEFAULT_HIDDEN_DIM = 896
CLAUSE_FINAL = (",", ".", "?", "!", ";")


class SequencingError(RuntimeError):
    """Ticks presented out of order."""


class InvalidStateError(RuntimeError):
    pass


class DiscardedDraftError(RuntimeError):
    """A discarded speculative draft was asked to publish words."""


class Phase(Enum):
    LISTENING = "listening"
    DRAFTING = "drafting"
    SPEAKING = "speaking"
    STOPPED = "stopped"


@dataclass(frozen=True)
class DuplexState:
    phase: Phase = Phase.LISTENING
    turn_open: bool = False
    fork_tick: Optional[int] = None
    last_tick: Optional[int] = None
    speech_until: Optional[int] = None
    awaiting_response: bool = False
    paused: bool = False
    last_word_final: bool = False
    forked: bool = False
    end_tick: Optional[int] = None
    history: tuple[str, ...] = ()

    def __post_init__(self):
        active = self.phase in (Phase.DRAFTING, Phase.SPEAKING)
        if active != (self.fork_tick is not None):
            raise InvalidStateError(f"fork_tick={self.fork_tick} inconsistent with phase {self.phase.value}")


@dataclass
class DuplexController:
    """Rule-based stand-in for the duplex model's per-tick decisions.

    A user word occupies ``word_ticks`` ticks. A response opens once the
    user has been silent for ``endpoint_ticks`` after speaking. With
    ``respect_pause`` a PAUSE event holds the floor until the next word;
    without it the controller treats the pause as silence.
    """

    word_ticks: int = 3
    endpoint_ticks: int = 1
    respect_pause: bool = True
    backchannel: bool = False

    def initial(self) -> DuplexState:
        return DuplexState()

    def step(self, state: DuplexState, tick: int, user_event=None) -> tuple[DuplexState, ControlToken]:
        if state.last_tick is not None and tick <= state.last_tick:
            raise SequencingError(f"tick {tick} presented after tick {state.last_tick}")
        word = is_word(user_event)
        pause = user_event == ControlToken.PAUSE

        speech = {}
        if word:
            speech = dict(
                speech_until=tick + self.word_ticks,
                awaiting_response=True,
                paused=False,
                last_word_final=user_event.rstrip().endswith(CLAUSE_FINAL),
            )
        elif pause and self.respect_pause:
            speech = dict(paused=True)

        if state.phase in (Phase.DRAFTING, Phase.SPEAKING):
            # a response whose audio has run out ends before any overlap counts
            if state.end_tick is not None and tick >= state.end_tick:
                closed = dict(phase=Phase.LISTENING, turn_open=False, fork_tick=None, forked=False, end_tick=None)
                if state.turn_open:
                    return replace(state, last_tick=tick, **closed, **speech), ControlToken.EOS
                # a finished backchannel leaves this tick free for a normal decision
                state = replace(state, **closed)
            elif word and state.turn_open:
                # barge-in: halt playback, drop whatever is still buffered
                new = replace(
                    state, phase=Phase.STOPPED, turn_open=False, fork_tick=None, forked=False,
                    end_tick=None, last_tick=tick, **speech,
                )
                return new, ControlToken.STP
            else:
                return replace(state, last_tick=tick, **speech), ControlToken.SIL

        # a backchannel answers the clause the user just finished, not the new word
        clause_done = state.last_word_final and tick == state.speech_until and state.awaiting_response
        state = replace(state, phase=Phase.LISTENING, last_tick=tick, **speech)
        if (
            state.awaiting_response
            and not state.paused
            and state.speech_until is not None
            and tick - state.speech_until >= self.endpoint_ticks
        ):
            new = replace(state, phase=Phase.DRAFTING, turn_open=True, fork_tick=tick, awaiting_response=False)
            return new, ControlToken.BOS
        if self.backchannel and clause_done:
            new = replace(state, phase=Phase.DRAFTING, turn_open=False, fork_tick=tick)
            return new, ControlToken.BOC
        return state, ControlToken.SIL

    def begin_speaking(self, state: DuplexState) -> DuplexState:
        if state.phase != Phase.DRAFTING:
            raise InvalidStateError(f"cannot start speaking from {state.phase.value}")
        return replace(state, phase=Phase.SPEAKING)

    def schedule_end(self, state: DuplexState, tick: int) -> DuplexState:
        """Arrange for the response to complete (EOS) at ``tick``."""
        if state.phase not in (Phase.DRAFTING, Phase.SPEAKING):
            raise InvalidStateError(f"no active response in {state.phase.value}")
        return replace(state, end_tick=tick)

    def consume(self, state: DuplexState, words: Sequence[str]) -> DuplexState:
        """Append committed words to the main stream's agent-side history."""
        return replace(state, history=state.history + tuple(words))


# -- drafts ------------------------------------------------------------------


@dataclass(frozen=True)
class DraftContext:
    """What the speculative stream sees: a snapshot frozen at the fork tick."""

    script_id: str
    turn_index: int
    fork_tick: int = 0
    user_words: tuple[str, ...] = ()
    history: tuple[tuple[str, str], ...] = ()
    reference_words: Optional[tuple[str, ...]] = None

    @property
    def turn_id(self) -> str:
        return f"{self.script_id}:{self.turn_index}"


@dataclass(frozen=True, eq=False)
class DraftPrefix:
    words: tuple[str, ...]
    hidden_states: np.ndarray
    scalar_features: np.ndarray
    draft_duration_ms: float
    word_latencies_ms: tuple[float, ...] = ()

    def __post_init__(self):
        words = tuple(self.words)
        h = np.asarray(self.hidden_states, dtype=np.float64)
        s = np.asarray(self.scalar_features, dtype=np.float64)
        object.__setattr__(self, "words", words)
        object.__setattr__(self, "hidden_states", h)
        object.__setattr__(self, "scalar_features", s)
        n = len(words)
        if n < 1:
            raise ValueError("a draft prefix needs at least one word")
        if h.ndim != 2 or h.shape[0] != n:
            raise ValueError(f"hidden_states must be ({n}, d), got {h.shape}")
        if s.shape != (n, 3):
            raise ValueError(f"scalar_features must be ({n}, 3), got {s.shape}")
        if np.any(s[:, 0] < 0) or np.any(s[:, 1] > 0) or np.any(s[:, 2] < 0):
            raise ValueError("scalar features violate entropy >= 0, log_prob <= 0, margin >= 0")

    def __len__(self):
        return len(self.words)

    @property
    def hidden_dim(self) -> int:
        return self.hidden_states.shape[1]


class DraftSource(Protocol):
    hidden_dim: int

    def draft(self, context: DraftContext, max_words: int) -> DraftPrefix:
        ...


def _stable_int(*parts) -> int:
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _word_features(rng: np.random.Generator, vocab: int, boost: float) -> np.ndarray:
    from .verifier.features import compute_scalar_features

    logits = rng.normal(0.0, 1.0, vocab)
    top = int(np.argmax(logits))
    logits[top] += boost
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return compute_scalar_features(p, int(np.argmax(p))).as_array()


def _latencies(per_word_ms: float, n: int, jitter: float, rng: np.random.Generator) -> tuple[float, ...]:
    if jitter <= 0:
        return (float(per_word_ms),) * n
    mu = math.log(per_word_ms) - 0.5 * jitter**2
    return tuple(float(x) for x in rng.lognormal(mu, jitter, n))


@dataclass
class ScriptedSource:
    """Replays prefixes recorded per turn id, with fixed per-word decode latency.

    Hidden states and calibration features are synthesized deterministically
    from the words, since no model runs here.
    """

    prefixes: dict
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    seed: int = 0
    confidence_boost: float = 3.0

    def draft(self, context: DraftContext, max_words: int) -> DraftPrefix:
        if context.turn_id not in self.prefixes:
            raise KeyError(f"no scripted prefix for turn {context.turn_id}")
        words, per_word_ms = self.prefixes[context.turn_id]
        words = tuple(words)[: max(1, max_words)]
        rng = np.random.default_rng(_stable_int(self.seed, context.turn_id))
        hidden = np.stack(
            [np.random.default_rng(_stable_int(self.seed, "word", w.lower())).normal(0, 1, self.hidden_dim) for w in words]
        )
        feats = np.stack([_word_features(rng, 32, self.confidence_boost) for _ in words])
        lat = (float(per_word_ms),) * len(words)
        return DraftPrefix(words, hidden, feats, math.fsum(lat), lat)


def read_prefix_file(path) -> dict:
    """Parse ``turn_id | word1 word2 ... | per-word-ms`` records."""
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        turn_id, words, ms = (p.strip() for p in line.split("|"))
        out[turn_id] = (tuple(words.split()), float(ms))
    return out


def write_prefix_file(prefixes: dict, path) -> None:
    lines = [f"{tid} | {' '.join(words)} | {ms:g}" for tid, (words, ms) in sorted(prefixes.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


OPENERS = ("Sure,", "I", "can", "help", "with", "that.", "Let", "me", "think.")
OFF_TOPIC = ("banana", "purple", "seventeen", "umbrella", "quantum", "giraffe", "marble", "tuesday", "velvet", "cactus")


@dataclass
class StochasticSource:
    """Seeded simulation of a draft model.

    Each turn is good (reference opening) or bad (off-topic words) with
    probability ``bad_rate``. Hidden states are drawn around class means
    ``separation`` apart and per-word distributions are peaked for good
    drafts and flat for bad ones, so the verifier has signal to learn.
    Scripts in ``trained_on`` are memorized: they always draft well, which
    is the leakage that out-of-fold generation exists to avoid.
    """

    hidden_dim: int = DEFAULT_HIDDEN_DIM
    bad_rate: float = 0.054
    per_word_ms: float = 14.2
    latency_jitter: float = 0.0
    separation: float = 1.0
    noise: float = 1.0
    vocab_size: int = 32
    seed: int = 0
    space_seed: int = 1234
    trained_on: frozenset = field(default_factory=frozenset)
    _means: Optional[tuple] = field(default=None, init=False, repr=False)

    def _class_means(self):
        if self._means is None:
            rng = np.random.default_rng(self.space_seed)
            direction = rng.normal(0, 1, self.hidden_dim)
            direction /= np.linalg.norm(direction)
            base = rng.normal(0, 0.5, self.hidden_dim)
            half = 0.5 * self.separation * direction * math.sqrt(self.hidden_dim)
            self._means = (base + half, base - half)
        return self._means

    def is_bad(self, context: DraftContext) -> bool:
        if context.script_id in self.trained_on:
            return False
        rng = np.random.default_rng(_stable_int(self.seed, "label", context.turn_id))
        return bool(rng.random() < self.bad_rate)

    def draft(self, context: DraftContext, max_words: int) -> DraftPrefix:
        max_words = max(1, int(max_words))
        bad = self.is_bad(context)
        rng = np.random.default_rng(_stable_int(self.seed, "draft", context.turn_id))
        if bad:
            words = tuple(OFF_TOPIC[i] for i in rng.integers(0, len(OFF_TOPIC), max_words))
        elif context.reference_words:
            words = tuple(context.reference_words[:max_words])
        else:
            words = OPENERS[:max_words]
        n = len(words)
        good_mean, bad_mean = self._class_means()
        mean = bad_mean if bad else good_mean
        noise = self.noise
        if context.script_id in self.trained_on:
            noise *= 0.25
        hidden = mean + noise * rng.normal(0, 1, (n, self.hidden_dim))
        boost = (1.0 if bad else 3.5) + 0.7 * rng.normal(0, 1, n)
        feats = np.stack([_word_features(rng, self.vocab_size, max(b, 0.0)) for b in boost])
        lat = _latencies(self.per_word_ms, n, self.latency_jitter, rng)
        return DraftPrefix(words, hidden, feats, math.fsum(lat), lat)


# -- fork ----------------------------------------------------------------------


class SpeculativeStream:
    """Free-running draft producer detached from live input.

    The context is a frozen snapshot taken at the fork tick; nothing the
    user says afterwards reaches it.
    """

    def __init__(self, source: DraftSource, context: DraftContext, prefix_len: int, initiation: ControlToken):
        self.source = source
        self.context = context
        self.prefix_len = int(prefix_len)
        self.initiation = initiation
        self.status = "pending"
        self._prefix: Optional[DraftPrefix] = None

    def draft(self) -> DraftPrefix:
        if self._prefix is None:
            prefix = self.source.draft(self.context, self.prefix_len)
            if len(prefix) > self.prefix_len:
                raise ValueError(f"source drafted {len(prefix)} words, limit is {self.prefix_len}")
            self._prefix = prefix
        return self._prefix

    def discard(self) -> None:
        if self.status != "committed":
            self.status = "discarded"

    def release(self) -> tuple[str, ...]:
        """Hand the drafted words over for publication; marks the draft committed."""
        if self.status == "discarded":
            raise DiscardedDraftError(f"draft for {self.context.turn_id} was discarded")
        self.status = "committed"
        return self.draft().words


@dataclass
class ForkHandle:
    main_stream: DuplexState
    speculative_stream: SpeculativeStream


def fork(
    state: DuplexState,
    tick: int,
    source: DraftSource,
    prefix_len: int,
    context: Optional[DraftContext] = None,
) -> ForkHandle:
    """Split the controller into its main stream and a speculative stream.

    ``state`` is the state returned by :meth:`DuplexController.step` for the
    tick that emitted BOS or BOC.
    """
    if state.forked:
        raise InvalidStateError(f"already forked at tick {state.fork_tick}")
    if state.phase != Phase.DRAFTING or state.fork_tick != tick:
        raise InvalidStateError(f"no response initiation at tick {tick} (phase {state.phase.value})")
    if prefix_len < 1:
        raise ValueError("prefix_len must be >= 1")
    initiation = ControlToken.BOS if state.turn_open else ControlToken.BOC
    context = context or DraftContext(script_id="live", turn_index=0, fork_tick=tick)
    stream = SpeculativeStream(source, replace(context, fork_tick=tick), prefix_len, initiation)
    return ForkHandle(replace(state, forked=True), stream)


def draft_onset_latency(prefix: DraftPrefix, t_verifier_ms: float) -> float:
    return prefix.draft_duration_ms + t_verifier_ms


def tick_synchronous_onset_ms(chunk_words: int) -> int:
    """Earliest chunk delivery if the controller emitted one word per tick."""
    return int(chunk_words) * TICK_MS
