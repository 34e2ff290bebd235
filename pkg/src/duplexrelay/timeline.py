"""Tick grid, control tokens, timed events and conversation scripts.

Every other module consumes these types. Time on the controller side is
an integer tick index; one tick is :data:`TICK_MS` milliseconds.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Union

logger = logging.getLogger(__name__)

#: Duration of one controller update, in milliseconds.
TICK_MS = 160


class ControlToken(str, Enum):
    SIL = "SIL"
    BOC = "BOC"
    BOS = "BOS"
    STP = "STP"
    EOS = "EOS"
    PAUSE = "PAUSE"

    def __str__(self) -> str:
        return f"[{self.value}]"

    @classmethod
    def parse(cls, text: str) -> "ControlToken":
        text = text.strip()
        if text.startswith("[") and text.endswith("]"):
            text = text[1:-1]
        return cls(text.upper())


AGENT_TOKENS = frozenset(
    {ControlToken.SIL, ControlToken.BOC, ControlToken.BOS, ControlToken.STP, ControlToken.EOS}
)
USER_TOKENS = frozenset({ControlToken.PAUSE})


class Channel(str, Enum):
    USER = "user"
    AGENT = "agent"


Payload = Union[ControlToken, str]

_CHANNEL_RANK = {Channel.USER: 0, Channel.AGENT: 1}


def is_word(payload) -> bool:
    return isinstance(payload, str) and not isinstance(payload, ControlToken)


def ticks_between(a: int, b: int) -> int:
    """Signed milliseconds from tick ``a`` to tick ``b``."""
    return (int(b) - int(a)) * TICK_MS


def ms_to_ticks(ms: float) -> int:
    """Round a duration to the nearest whole tick, halves rounding up."""
    return int(ms / TICK_MS + 0.5)


@dataclass(frozen=True)
class TimedEvent:
    tick: int
    channel: Channel
    payload: Payload

    def shifted(self, delta: int) -> "TimedEvent":
        return TimedEvent(self.tick + delta, self.channel, self.payload)


@dataclass(frozen=True)
class Violation:
    tick: int
    channel: str
    message: str

    def __str__(self) -> str:
        return f"tick {self.tick} [{self.channel}]: {self.message}"


@dataclass(frozen=True)
class AgentTurn:
    """A reference agent response, delimited by its opening BOS and closing EOS/STP."""

    index: int
    bos_tick: int
    end_tick: Optional[int]
    end_token: Optional[ControlToken]
    words: tuple[str, ...]
    word_ticks: tuple[int, ...]


@dataclass(frozen=True)
class UserTurn:
    index: int
    events: tuple[TimedEvent, ...]

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(e.payload for e in self.events if is_word(e.payload))

    @property
    def start_tick(self) -> Optional[int]:
        return self.events[0].tick if self.events else None


@dataclass(frozen=True)
class ConversationScript:
    """Timed dual-channel events plus the ground-truth agent actions.

    Events are stored in canonical order (ascending tick, user before
    agent); events sharing a tick and channel keep their insertion order.
    """

    events: tuple[TimedEvent, ...] = ()
    reference_actions: tuple[tuple[int, ControlToken], ...] = ()
    script_id: str = "script"
    seed: Optional[int] = None
    metadata: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        events = tuple(self.events)
        ordered = sorted(
            range(len(events)), key=lambda i: (events[i].tick, _CHANNEL_RANK[Channel(events[i].channel)], i)
        )
        object.__setattr__(self, "events", tuple(events[i] for i in ordered))
        refs = tuple((int(t), ControlToken(tok)) for t, tok in self.reference_actions)
        order = sorted(range(len(refs)), key=lambda i: (refs[i][0], i))
        object.__setattr__(self, "reference_actions", tuple(refs[i] for i in order))

    # -- views -------------------------------------------------------------
    def channel_events(self, channel: Channel) -> list[TimedEvent]:
        return [e for e in self.events if e.channel == channel]

    @property
    def last_tick(self) -> int:
        ticks = [e.tick for e in self.events] + [t for t, _ in self.reference_actions]
        return max(ticks) if ticks else 0

    def bos_ticks(self) -> list[int]:
        return [t for t, tok in self.reference_actions if tok == ControlToken.BOS]

    def agent_turns(self) -> list[AgentTurn]:
        turns = []
        agent_words = [e for e in self.events if e.channel == Channel.AGENT and is_word(e.payload)]
        opening = None
        for tick, tok in self.reference_actions:
            if tok == ControlToken.BOS and opening is None:
                opening = tick
            elif tok in (ControlToken.EOS, ControlToken.STP) and opening is not None:
                turns.append((opening, tick, tok))
                opening = None
        if opening is not None:
            turns.append((opening, None, None))
        out = []
        for i, (start, end, tok) in enumerate(turns):
            words = [e for e in agent_words if e.tick >= start and (end is None or e.tick < end)]
            out.append(
                AgentTurn(i, start, end, tok, tuple(e.payload for e in words), tuple(e.tick for e in words))
            )
        return out

    def user_turns(self) -> list[UserTurn]:
        """User events grouped by the reference BOS that answers them.

        Turn ``k`` holds the user events after BOS ``k-1`` up to and
        including BOS ``k``; events after the last BOS form a trailing turn.
        """
        bounds = self.bos_ticks()
        groups: list[list[TimedEvent]] = [[] for _ in range(len(bounds) + 1)]
        for e in self.events:
            if e.channel != Channel.USER:
                continue
            k = 0
            while k < len(bounds) and e.tick > bounds[k]:
                k += 1
            groups[k].append(e)
        if not groups[-1]:
            groups.pop()
        return [UserTurn(i, tuple(g)) for i, g in enumerate(groups)]

    def replace(self, **changes) -> "ConversationScript":
        kw = dict(
            events=self.events,
            reference_actions=self.reference_actions,
            script_id=self.script_id,
            seed=self.seed,
            metadata=dict(self.metadata),
        )
        kw.update(changes)
        return ConversationScript(**kw)

    def dense_reference(self, horizon: Optional[int] = None) -> list[tuple[int, ControlToken]]:
        """One reference action per tick, SIL where no action is annotated."""
        horizon = self.last_tick if horizon is None else horizon
        annotated = {}
        for t, tok in self.reference_actions:
            annotated.setdefault(t, tok)
        return [(t, annotated.get(t, ControlToken.SIL)) for t in range(horizon + 1)]


def validate_script(script: ConversationScript) -> list[Violation]:
    """Check the type invariants of a script; violations are returned, not raised."""
    out: list[Violation] = []
    last = {}
    for e in script.events:
        ch = Channel(e.channel)
        if e.tick < 0:
            out.append(Violation(e.tick, ch.value, "negative tick"))
        if e.tick < last.get(ch, e.tick):
            out.append(Violation(e.tick, ch.value, "tick decreases within channel"))
        last[ch] = e.tick
        if isinstance(e.payload, ControlToken):
            allowed = USER_TOKENS if ch == Channel.USER else AGENT_TOKENS
            if e.payload not in allowed:
                out.append(Violation(e.tick, ch.value, f"{e.payload} not allowed on {ch.value} channel"))
        elif not is_word(e.payload) or not e.payload.strip():
            out.append(Violation(e.tick, ch.value, "empty or non-text payload"))

    # Replay the reference actions through the agent turn automaton.
    open_since = None
    spans = []
    boc_ticks = set()
    for tick, tok in script.reference_actions:
        if tick < 0:
            out.append(Violation(tick, "reference", "negative tick"))
        if tok == ControlToken.PAUSE:
            out.append(Violation(tick, "reference", "PAUSE is not an agent action"))
        elif tok == ControlToken.BOS:
            if open_since is not None:
                out.append(Violation(tick, "reference", f"BOS while response opened at tick {open_since} is still open"))
            else:
                open_since = tick
        elif tok == ControlToken.BOC:
            if open_since is not None:
                out.append(Violation(tick, "reference", "BOC during an open agent response"))
            boc_ticks.add(tick)
        elif tok in (ControlToken.STP, ControlToken.EOS):
            if open_since is None:
                out.append(Violation(tick, "reference", f"{tok} without an open agent response"))
            else:
                spans.append((open_since, tick))
                open_since = None
    if open_since is not None:
        spans.append((open_since, None))

    for e in script.events:
        if e.channel != Channel.AGENT or not is_word(e.payload):
            continue
        inside = any(s <= e.tick and (end is None or e.tick < end) for s, end in spans)
        if not inside and e.tick not in boc_ticks:
            out.append(Violation(e.tick, Channel.AGENT.value, f"agent word {e.payload!r} outside any response or backchannel"))
    return out


# -- file format -----------------------------------------------------------

_REF = "ref"


def _format_payload(payload: Payload) -> str:
    if isinstance(payload, ControlToken):
        return str(payload)
    if "|" in payload or "\n" in payload or not payload.strip() or payload != payload.strip():
        raise ValueError(f"word payload cannot be serialized: {payload!r}")
    if payload.startswith("[") and payload.endswith("]"):
        raise ValueError(f"word payload looks like a control token: {payload!r}")
    return payload


def _parse_payload(text: str) -> Payload:
    if text.startswith("[") and text.endswith("]"):
        return ControlToken.parse(text)
    return text


def dumps(script: ConversationScript) -> str:
    lines = [f"#@ id: {script.script_id}"]
    if script.seed is not None:
        lines.append(f"#@ seed: {script.seed}")
    records = [(e.tick, _CHANNEL_RANK[Channel(e.channel)], e.channel.value, _format_payload(e.payload)) for e in script.events]
    records += [(t, 2, _REF, str(tok)) for t, tok in script.reference_actions]
    # sort is stable: insertion order survives within (tick, channel)
    records.sort(key=lambda r: (r[0], r[1]))
    lines += [f"{t} | {ch} | {p}" for t, _, ch, p in records]
    return "\n".join(lines) + "\n"


def loads(text: str) -> ConversationScript:
    events, refs = [], []
    script_id, seed = "script", None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#@"):
            key, _, value = line[2:].partition(":")
            key, value = key.strip(), value.strip()
            if key == "id":
                script_id = value
            elif key == "seed":
                seed = int(value)
            continue
        if line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("|", 2)]
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'tick | channel | payload', got {raw!r}")
        tick, channel, payload = int(parts[0]), parts[1], _parse_payload(parts[2])
        if channel == _REF:
            refs.append((tick, ControlToken(payload)))
        else:
            events.append(TimedEvent(tick, Channel(channel), payload))
    return ConversationScript(tuple(events), tuple(refs), script_id=script_id, seed=seed)


def read_script(path) -> ConversationScript:
    return loads(Path(path).read_text(encoding="utf-8"))


def write_script(script: ConversationScript, path) -> None:
    Path(path).write_text(dumps(script), encoding="utf-8")


def read_scripts(directory) -> list[ConversationScript]:
    return [read_script(p) for p in sorted(Path(directory).glob("*.script"))]


def build_script(
    user: Iterable[tuple[int, Payload]] = (),
    agent: Iterable[tuple[int, Payload]] = (),
    refs: Iterable[tuple[int, ControlToken]] = (),
    script_id: str = "script",
    seed: Optional[int] = None,
) -> ConversationScript:
    """Convenience constructor from (tick, payload) pairs per channel."""
    events = [TimedEvent(t, Channel.USER, p) for t, p in user]
    events += [TimedEvent(t, Channel.AGENT, p) for t, p in agent]
    return ConversationScript(tuple(events), tuple(refs), script_id=script_id, seed=seed)
