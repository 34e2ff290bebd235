"""Cascaded ASR -> LLM path, triggered by the controller's BOS.

Clients sit behind two small interfaces so a simulated backend and a real
streaming endpoint are interchangeable without touching the session code.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Iterator, Optional, Protocol, Sequence

import numpy as np

from .timeline import TimedEvent, is_word

logger = logging.getLogger(__name__)

MAX_SEAM_WORDS = 3


class InvalidTriggerError(RuntimeError):
    pass


class LlmClientError(RuntimeError):
    pass


class FallbackExhaustedError(RuntimeError):
    """The slow path could not produce output for a turn."""

    def __init__(self, turn_id: str, diagnostic: str):
        super().__init__(f"slow path failed for {turn_id}: {diagnostic}")
        self.turn_id = turn_id
        self.diagnostic = diagnostic


def _seed_for(*parts) -> int:
    return int.from_bytes(hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class LatencyModel:
    """Constant latency, or seeded log-normal with the given mean."""

    mean_ms: float
    kind: str = "constant"
    sigma: float = 0.3

    def __post_init__(self):
        if self.kind not in ("constant", "lognormal"):
            raise ValueError(f"unknown latency model {self.kind!r}")
        if self.mean_ms < 0:
            raise ValueError("latency must be non-negative")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "constant" or self.mean_ms == 0:
            return float(self.mean_ms)
        mu = math.log(self.mean_ms) - 0.5 * self.sigma**2
        return float(rng.lognormal(mu, self.sigma))


# -- trigger -------------------------------------------------------------------


@dataclass(frozen=True)
class UserTurnInput:
    turn_id: str
    events: tuple[TimedEvent, ...]
    flagged_empty: bool = False

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(e.payload for e in self.events if is_word(e.payload))


class TurnTracker:
    """Buffers live user events so a BOS can hand the current turn to ASR."""

    def __init__(self, session_id: str = "session"):
        self.session_id = session_id
        self.user_events: list[TimedEvent] = []
        self.bos_ticks: list[int] = []

    def observe(self, event: TimedEvent) -> None:
        self.user_events.append(event)

    def mark_bos(self, tick: int) -> None:
        self.bos_ticks.append(tick)


def trigger(tracker: TurnTracker, bos_tick: int) -> UserTurnInput:
    """User events of the turn answered by the BOS at ``bos_tick``."""
    if bos_tick not in tracker.bos_ticks:
        raise InvalidTriggerError(f"no BOS was emitted at tick {bos_tick}")
    k = tracker.bos_ticks.index(bos_tick)
    after = tracker.bos_ticks[k - 1] if k > 0 else -1
    events = tuple(e for e in tracker.user_events if after < e.tick <= bos_tick)
    words = [e for e in events if is_word(e.payload)]
    if not words:
        logger.warning("empty user turn before BOS at tick %d", bos_tick)
    return UserTurnInput(f"{tracker.session_id}:{k}", events, flagged_empty=not words)


# -- prompts -------------------------------------------------------------------


def _template(name: str) -> str:
    return resources.files("duplexrelay").joinpath("templates").joinpath(name).read_text(encoding="utf-8")


def format_history(history: Sequence[tuple[str, str]]) -> str:
    lines = []
    for role, text in history:
        label = "User" if role.lower().startswith("u") else "Assistant"
        lines.append(f"{label}: {text}")
    return "\n".join(lines)


def build_prompt(history: Sequence[tuple[str, str]], forced_prefix: Optional[Sequence[str]] = None) -> str:
    if forced_prefix:
        return (
            _template("continuation.txt")
            .replace("{history}", format_history(history))
            .replace("{forced_prefix}", " ".join(forced_prefix))
        )
    return _template("full_response.txt").replace("{history}", format_history(history))


# -- clients -------------------------------------------------------------------


@dataclass(frozen=True)
class LlmChunk:
    words: tuple[str, ...]
    latency_ms: float  # arrival time since the request was issued


class AsrClient(Protocol):
    def transcribe(self, turn: UserTurnInput) -> tuple[str, float]:
        ...


class LlmClient(Protocol):
    def stream(self, prompt: str, forced_prefix: Optional[Sequence[str]] = None) -> Iterator[LlmChunk]:
        ...


@dataclass
class SimulatedAsr:
    latency: LatencyModel = field(default_factory=lambda: LatencyModel(250.0))
    seed: int = 0

    def transcribe(self, turn: UserTurnInput) -> tuple[str, float]:
        rng = np.random.default_rng(_seed_for(self.seed, "asr", turn.turn_id))
        return " ".join(turn.words), self.latency.sample(rng)


def _norm(word: str) -> str:
    return word.lower().strip(",.?!;:\"'")


GENERIC_RESPONSE = ("I", "see,", "could", "you", "tell", "me", "a", "bit", "more", "about", "that?")


class ReferenceResponder:
    """Answers the k-th user turn in a prompt with the k-th reference response."""

    def __init__(self, responses: Sequence[Sequence[str]], default: Sequence[str] = GENERIC_RESPONSE):
        self.responses = [tuple(r) for r in responses]
        self.default = tuple(default)

    def __call__(self, prompt: str) -> tuple[str, ...]:
        history = prompt.split("### CONVERSATION HISTORY:", 1)[-1].split("### TASK:", 1)[0]
        k = sum(1 for line in history.splitlines() if line.startswith("User:")) - 1
        if 0 <= k < len(self.responses) and self.responses[k]:
            return self.responses[k]
        return self.default


@dataclass
class SimulatedLlm:
    """Streams a responder's words in fixed-size chunks with sampled latencies.

    With a forced prefix the model continues after it when the response
    opens with those words; otherwise it emits its own full response and
    leaves any overlap to the seam guard.
    """

    responder: Callable[[str], Sequence[str]] = field(default=lambda prompt: GENERIC_RESPONSE)
    first_chunk: LatencyModel = field(default_factory=lambda: LatencyModel(841.0))
    chunk_interval: LatencyModel = field(default_factory=lambda: LatencyModel(120.0))
    chunk_words: int = 5
    seed: int = 0
    fail: bool = False

    def stream(self, prompt: str, forced_prefix: Optional[Sequence[str]] = None) -> Iterator[LlmChunk]:
        if self.fail:
            raise LlmClientError("simulated backend failure")
        rng = np.random.default_rng(_seed_for(self.seed, "llm", prompt))
        words = tuple(self.responder(prompt))
        if forced_prefix:
            head = [_norm(w) for w in words[: len(forced_prefix)]]
            if head == [_norm(w) for w in forced_prefix]:
                words = words[len(forced_prefix):]
        t = self.first_chunk.sample(rng)
        for i in range(0, len(words), self.chunk_words):
            if i:
                t += self.chunk_interval.sample(rng)
            yield LlmChunk(words[i : i + self.chunk_words], t)


class HttpLlmClient:
    """Streaming client for a newline-delimited JSON completion endpoint.

    Request: ``POST {endpoint}`` with ``{"prompt", "forced_prefix", "stream": true}``.
    Response: one JSON object per line, ``{"text": "..."}`` per chunk and an
    optional final ``{"done": true}``. Chunk latency is wall-clock time
    since the request was sent.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, client=None, clock=time.perf_counter):
        import httpx

        self.endpoint = endpoint
        self.timeout = timeout
        self._client = client or httpx.Client(timeout=timeout)
        self._clock = clock

    def stream(self, prompt: str, forced_prefix: Optional[Sequence[str]] = None) -> Iterator[LlmChunk]:
        import httpx

        body = {"prompt": prompt, "forced_prefix": " ".join(forced_prefix) if forced_prefix else None, "stream": True}
        started = self._clock()
        try:
            with self._client.stream("POST", self.endpoint, json=body) as resp:
                resp.raise_for_status()
                for line in resp.iter_lines():
                    if not line.strip():
                        continue
                    msg = json.loads(line)
                    if msg.get("done"):
                        break
                    if "error" in msg:
                        raise LlmClientError(str(msg["error"]))
                    words = tuple(str(msg.get("text", "")).split())
                    if words:
                        yield LlmChunk(words, (self._clock() - started) * 1000.0)
        except (httpx.HTTPError, json.JSONDecodeError) as exc:
            raise LlmClientError(str(exc)) from exc


# -- generation ----------------------------------------------------------------


def seam_overlap(prefix: Sequence[str], continuation: Sequence[str], max_words: int = MAX_SEAM_WORDS) -> int:
    """Length of the longest prefix-suffix / continuation-head word overlap."""
    limit = min(max_words, len(prefix), len(continuation))
    for k in range(limit, 0, -1):
        if [_norm(w) for w in prefix[-k:]] == [_norm(w) for w in continuation[:k]]:
            return k
    return 0


@dataclass
class SlowPathResult:
    transcript: str
    chunks: list  # [(words, arrival_ms since trigger)]
    t_asr_ms: float
    t_generate_ms: Optional[float]
    first_chunk_latency_ms: Optional[float]
    used_prefix: Optional[tuple[str, ...]]
    prompt: str = ""
    seam_removed: int = 0

    @property
    def continuation(self) -> tuple[str, ...]:
        return tuple(w for words, _ in self.chunks for w in words)


def generate(
    asr: AsrClient,
    llm: LlmClient,
    turn: UserTurnInput,
    history: Sequence[tuple[str, str]] = (),
    committed_prefix: Optional[Sequence[str]] = None,
) -> SlowPathResult:
    """Transcribe the turn, then stream a response or a prefix continuation."""
    prefix = tuple(committed_prefix) if committed_prefix else None
    try:
        transcript, t_asr = asr.transcribe(turn)
        if t_asr < 0:
            raise ValueError("ASR reported negative latency")
        prompt = build_prompt(list(history) + [("User", transcript)], prefix)
        raw = list(llm.stream(prompt, prefix))
    except Exception as exc:  # surfaced to the session as a failed turn
        raise FallbackExhaustedError(turn.turn_id, f"{type(exc).__name__}: {exc}") from exc

    removed = 0
    chunks = []
    t_gen = None
    for i, chunk in enumerate(raw):
        words = chunk.words
        if prefix and i == 0:
            removed = seam_overlap(prefix, words)
            words = words[removed:]
        if words:
            if t_gen is None:
                t_gen = chunk.latency_ms
            chunks.append((tuple(words), t_asr + chunk.latency_ms))
    first = t_asr + t_gen if t_gen is not None else None
    return SlowPathResult(transcript, chunks, t_asr, t_gen, first, prefix, prompt, removed)
