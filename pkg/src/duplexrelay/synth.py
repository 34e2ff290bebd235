"""Synthetic conversations with injected duplex phenomena.

All injections work on the tick grid. A word lasts ``word_duration_ms``
rounded to whole ticks, and randomness is drawn from streams keyed by
(seed, script id, injection kind, turn index), so injections on distinct
turns commute and reruns are byte-identical.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .fast_path import CLAUSE_FINAL
from .timeline import Channel, ControlToken, ConversationScript, TimedEvent, is_word, ms_to_ticks, validate_script

logger = logging.getLogger(__name__)

BACKCHANNEL_LEXICON = ("uh-huh", "right", "yeah", "mm-hmm", "I see")


@dataclass(frozen=True)
class InjectionConfig:
    interruption_truncation_range: tuple[float, float] = (0.20, 0.60)
    interruption_overlap_ms: float = 320.0
    inter_turn_silence_ms: float = 200.0
    pause_insertion_rate: float = 0.0
    backchannel_rate: float = 0.0
    interruption_rate: float = 0.0
    pause_ms: float = 960.0
    word_duration_ms: float = 400.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.interruption_truncation_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"truncation range must lie inside (0, 1), got {(lo, hi)}")
        if self.interruption_overlap_ms < 0:
            raise ValueError("overlap must be non-negative")
        for name in ("pause_insertion_rate", "backchannel_rate", "interruption_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.word_duration_ms <= 0 or self.pause_ms < 0 or self.inter_turn_silence_ms < 0:
            raise ValueError("durations must be non-negative (word duration positive)")
        object.__setattr__(self, "interruption_truncation_range", (float(lo), float(hi)))

    @property
    def word_ticks(self) -> int:
        return max(1, ms_to_ticks(self.word_duration_ms))

    @property
    def silence_ticks(self) -> int:
        return max(1, ms_to_ticks(self.inter_turn_silence_ms))

    @property
    def overlap_ticks(self) -> int:
        return ms_to_ticks(self.interruption_overlap_ms)

    @property
    def pause_ticks(self) -> int:
        return ms_to_ticks(self.pause_ms)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["interruption_truncation_range"] = list(self.interruption_truncation_range)
        return d


def _rng(*parts) -> np.random.Generator:
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _record(records: Optional[list], **fields) -> None:
    if records is not None:
        records.append(fields)


# -- template generator ----------------------------------------------------------

USER_LINES = (
    "I was looking at flights, but the prices keep changing. Any advice?",
    "My laptop has been slow lately, and I think it might be the battery.",
    "We are planning a trip to the coast, probably in late spring.",
    "Can you explain how compound interest works, in simple terms?",
    "I started learning guitar, but my fingers hurt after practice.",
    "The recipe says to rest the dough, though I am not sure why.",
    "I keep forgetting to water my plants, so some of them are wilting.",
    "Our team moved to a new tracker, and nobody likes it yet.",
    "I want to run a half marathon, maybe next autumn.",
    "My cat wakes me up at five, every single morning.",
)

ASSISTANT_LINES = (
    "Booking on a weekday morning usually helps, and setting a price alert saves you from checking constantly.",
    "A failing battery can throttle performance, so checking its health report is a good first step.",
    "Late spring is a lovely time for the coast, with mild weather and fewer crowds than summer.",
    "Compound interest means you earn interest on past interest, so the balance grows faster over time.",
    "Sore fingertips are normal at first, and short daily sessions build calluses without much pain.",
    "Resting lets the gluten relax, which makes the dough easier to shape and gives a better texture.",
    "A simple reminder on your phone or a self watering pot could keep them healthy.",
    "New tools take a few weeks to feel natural, so agreeing on a few shared conventions helps.",
    "That is a great goal, and a gradual plan of three runs a week will get you there comfortably.",
    "Feeding her a little later in the evening might shift her schedule back by an hour or so.",
)


def template_script(n_turns: int = 3, seed: int = 0, script_id: Optional[str] = None,
                    cfg: InjectionConfig = InjectionConfig()) -> ConversationScript:
    """Alternating user / assistant turns, closed by a final user turn.

    User words are ``word_ticks`` apart; agent word ``i`` sits at
    ``i * word_duration_ms`` rounded to the grid. Each response opens
    ``silence_ticks`` after the last user word ends and the next user turn
    starts the same gap after the response ends.
    """
    if n_turns < 1:
        raise ValueError("n_turns must be >= 1")
    rng = _rng(seed, "template")
    wt, gap = cfg.word_ticks, cfg.silence_ticks
    events, refs = [], []
    t = 0
    for k in range(n_turns + 1):
        for w in USER_LINES[int(rng.integers(len(USER_LINES)))].split():
            events.append(TimedEvent(t, Channel.USER, w))
            t += wt
        if k == n_turns:
            break
        t += gap
        refs.append((t, ControlToken.BOS))
        words = ASSISTANT_LINES[int(rng.integers(len(ASSISTANT_LINES)))].split()
        # agent speech runs at the synthesis rate, snapped to the grid
        for i, w in enumerate(words):
            events.append(TimedEvent(t + ms_to_ticks(i * cfg.word_duration_ms), Channel.AGENT, w))
        t += ms_to_ticks(len(words) * cfg.word_duration_ms)
        refs.append((t, ControlToken.EOS))
        t += gap
    sid = script_id if script_id is not None else f"template-{seed}"
    return ConversationScript(tuple(events), tuple(refs), script_id=sid, seed=seed)


# -- interruption ----------------------------------------------------------------


def retained_words(n_words: int, fraction: float) -> int:
    """Words kept when a turn is cut at ``fraction`` of its duration."""
    return min(max(int(fraction * n_words + 0.5), 1), n_words - 1)


def inject_interruption(
    script: ConversationScript,
    turn_index: int,
    cfg: InjectionConfig = InjectionConfig(),
    fraction: Optional[float] = None,
    records: Optional[list] = None,
) -> ConversationScript:
    """Cut assistant turn ``turn_index`` short and pull the next user turn into it.

    The next user turn starts ``overlap_ticks`` before the truncated end;
    everything from its old start onwards moves by the same amount. The
    reference EOS becomes an STP one tick after the overlap begins.
    """
    turns = script.agent_turns()

    def skip(reason):
        logger.info("interruption skipped on %s turn %d: %s", script.script_id, turn_index, reason)
        _record(records, op="interruption", script_id=script.script_id, turn=turn_index, status="skipped", detail=reason)
        return script

    if not 0 <= turn_index < len(turns):
        return skip("no such assistant turn")
    turn = turns[turn_index]
    if turn.end_token != ControlToken.EOS:
        return skip("turn is not closed by EOS")
    n = len(turn.words)
    if n < 2:
        return skip(f"turn has {n} word(s), need at least 2")
    old_start = min((e.tick for e in script.events if e.channel == Channel.USER and e.tick >= turn.end_tick), default=None)
    if old_start is None:
        return skip("no following user turn")
    if fraction is None:
        lo, hi = cfg.interruption_truncation_range
        fraction = float(_rng(cfg.seed, script.script_id, "interruption", turn_index).uniform(lo, hi))

    r = retained_words(n, fraction)
    cut = turn.word_ticks[r]  # first dropped word's slot is the truncated end
    new_start = max(cut - cfg.overlap_ticks, turn.bos_tick + 1)
    delta = new_start - old_start
    dropped = set(turn.word_ticks[r:])

    events = []
    for e in script.events:
        if e.channel == Channel.AGENT and is_word(e.payload) and turn.bos_tick <= e.tick < turn.end_tick and e.tick in dropped:
            continue
        events.append(e.shifted(delta) if e.tick >= old_start else e)
    refs = []
    for t, tok in script.reference_actions:
        if t == turn.end_tick and tok == ControlToken.EOS:
            refs.append((new_start + 1, ControlToken.STP))
        else:
            refs.append((t + delta if t >= old_start else t, tok))
    _record(records, op="interruption", script_id=script.script_id, turn=turn_index, status="applied",
            detail=dict(fraction=fraction, retained=r, stp_tick=new_start + 1, overlap_start=new_start))
    return script.replace(events=tuple(events), reference_actions=tuple(refs))


# -- backchannel -----------------------------------------------------------------

Locator = Callable[[ConversationScript, InjectionConfig], Sequence[int]]


def rule_based_locator(script: ConversationScript, cfg: InjectionConfig, turns: Optional[set] = None) -> list[int]:
    """Ticks right after clause-final user words that do not end their turn.

    Each candidate is kept with probability ``backchannel_rate``, drawn from
    a stream keyed by its user turn and word position.
    """
    out = []
    for ut in script.user_turns():
        if turns is not None and ut.index not in turns:
            continue
        words = [e for e in ut.events if is_word(e.payload)]
        for i, e in enumerate(words[:-1]):
            if not e.payload.endswith(CLAUSE_FINAL):
                continue
            if _rng(cfg.seed, script.script_id, "backchannel", ut.index, i).random() < cfg.backchannel_rate:
                out.append(e.tick + cfg.word_ticks)
    return out


def _agent_spans(script: ConversationScript):
    return [(t.bos_tick, t.end_tick) for t in script.agent_turns()]


def _user_position(script: ConversationScript, tick: int) -> Optional[tuple[int, int]]:
    """(user turn, words spoken before ``tick``) if ``tick`` falls inside a user turn."""
    for ut in script.user_turns():
        words = [e.tick for e in ut.events if is_word(e.payload)]
        if words and words[0] < tick <= words[-1]:
            return ut.index, sum(1 for w in words if w < tick)
    return None


def inject_backchannel(
    script: ConversationScript,
    cfg: InjectionConfig = InjectionConfig(),
    locator: Optional[Locator] = None,
    turns: Optional[set] = None,
    records: Optional[list] = None,
) -> ConversationScript:
    """Add a BOC reference and a lexicon acknowledgment at each located tick."""
    ticks = locator(script, cfg) if locator is not None else rule_based_locator(script, cfg, turns)
    spans = _agent_spans(script)
    existing = {t for t, tok in script.reference_actions if tok == ControlToken.BOC}
    events, refs = list(script.events), list(script.reference_actions)
    for tick in sorted(set(ticks)):
        reason = None
        position = _user_position(script, tick)
        if position is None:
            reason = "tick outside any user turn"
        elif any(s <= tick and (e is None or tick < e) for s, e in spans):
            reason = "tick inside an agent response"
        elif tick in existing:
            reason = "backchannel already present"
        if reason:
            _record(records, op="backchannel", script_id=script.script_id, tick=tick, status="rejected", detail=reason)
            continue
        choice = BACKCHANNEL_LEXICON[int(_rng(cfg.seed, script.script_id, "lexicon", *position).integers(len(BACKCHANNEL_LEXICON)))]
        events += [TimedEvent(tick, Channel.AGENT, w) for w in choice.split()]
        refs.append((tick, ControlToken.BOC))
        _record(records, op="backchannel", script_id=script.script_id, tick=tick, status="applied", detail=choice)
    if len(refs) == len(script.reference_actions):
        return script
    return script.replace(events=tuple(events), reference_actions=tuple(refs))


# -- pause -----------------------------------------------------------------------


def inject_pause(
    script: ConversationScript,
    cfg: InjectionConfig = InjectionConfig(),
    turns: Optional[set] = None,
    positions: Optional[dict] = None,
    records: Optional[list] = None,
) -> ConversationScript:
    """Insert a PAUSE after a word inside user turns and stretch everything after it.

    ``positions`` maps user turn index to the word index the pause follows;
    otherwise each turn with two or more words gets a pause with probability
    ``pause_insertion_rate`` at a seeded position. The reference stays SIL
    through the pause.
    """
    chosen = []
    for ut in script.user_turns():
        if turns is not None and ut.index not in turns:
            continue
        words = [e for e in ut.events if is_word(e.payload)]
        if len(words) < 2:
            continue
        if positions is not None:
            if ut.index not in positions:
                continue
            i = int(positions[ut.index])
            if not 0 <= i < len(words) - 1:
                raise ValueError(f"pause position {i} is not between two words of user turn {ut.index}")
        else:
            rng = _rng(cfg.seed, script.script_id, "pause", ut.index)
            if rng.random() >= cfg.pause_insertion_rate:
                continue
            i = int(rng.integers(len(words) - 1))
        chosen.append((words[i].tick + cfg.word_ticks, ut.index, i))
    if not chosen:
        return script

    # apply from the latest pause backwards so earlier ticks stay valid
    events, refs = list(script.events), list(script.reference_actions)
    for at, turn, i in sorted(chosen, reverse=True):
        d = cfg.pause_ticks
        events = [e.shifted(d) if e.tick >= at else e for e in events]
        events.append(TimedEvent(at, Channel.USER, ControlToken.PAUSE))
        refs = [(t + d if t >= at else t, tok) for t, tok in refs]
        _record(records, op="pause", script_id=script.script_id, turn=turn, status="applied", detail=dict(tick=at, after_word=i))
    return script.replace(events=tuple(events), reference_actions=tuple(refs))


# -- full pipeline ---------------------------------------------------------------


def inject_all(script: ConversationScript, cfg: InjectionConfig, records: Optional[list] = None) -> ConversationScript:
    """Interruptions, then pauses, then backchannels, each at its configured rate."""
    n_agent = len(script.agent_turns())
    for k in range(n_agent):
        if cfg.interruption_rate > 0 and _rng(cfg.seed, script.script_id, "interrupt?", k).random() < cfg.interruption_rate:
            script = inject_interruption(script, k, cfg, records=records)
    script = inject_pause(script, cfg, records=records)
    script = inject_backchannel(script, cfg, records=records)
    problems = validate_script(script)
    if problems:
        raise AssertionError(f"injection broke {script.script_id}: {problems[0]}")
    return script


@dataclass
class CorpusManifest:
    config: dict
    entries: list = field(default_factory=list)  # {script_id, seed, path}

    def to_dict(self) -> dict:
        return dict(config=self.config, entries=self.entries)
