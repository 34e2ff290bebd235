"""End-to-end sessions on a virtual clock, sweeps and corpus generation.

Each script is replayed by a small discrete-event loop. Controller ticks
and component deliveries (drafted prefix, slow-path chunks) sit in one
priority queue keyed by (time, priority, sequence); a tick at time t is
processed before any delivery landing at the same instant. Every random
draw comes from a stream keyed by stable identifiers, so a given config
and seed always reproduce the same report byte for byte.
"""
from __future__ import annotations

import dataclasses
import functools
import hashlib
import heapq
import json
import logging
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import yaml

from .fast_path import (
    DraftContext,
    DraftPrefix,
    DiscardedDraftError,
    DuplexController,
    Phase,
    ScriptedSource,
    StochasticSource,
    _word_features,
    fork,
    read_prefix_file,
)
from .metrics import SessionLog, SessionReport, TurnRecord, latency, session_report
from .relay_buffer import SLOW, ResponseBuffer, TtsSinkModel, _chunks, drain, relay_margin, truncate_on_stp
from .slow_path import (
    FallbackExhaustedError,
    HttpLlmClient,
    LatencyModel,
    ReferenceResponder,
    SimulatedAsr,
    SimulatedLlm,
    TurnTracker,
    generate,
    trigger,
)
from .synth import BACKCHANNEL_LEXICON, InjectionConfig, inject_all, template_script
from .timeline import TICK_MS, Channel, ControlToken, ConversationScript, is_word, read_scripts, validate_script, write_script
from .validation import check_prefix_len, check_threshold
from .verifier import FileLabelOracle, PrefixVerifier, RuleOracle, build_kfold_dataset, commit_mask, load_model

logger = logging.getLogger(__name__)

SYSTEMS = ("relay", "cascaded", "s2s_only")
ENV_SEED = "DUPLEXRELAY_SEED"
ENV_CONFIG = "DUPLEXRELAY_CONFIG"
MAX_EXTRA_TICKS = 5000


class InvariantViolation(AssertionError):
    """A run produced output that breaks a stated property."""


class ConfigError(ValueError):
    pass


# -- configuration -----------------------------------------------------------------


@dataclass
class RunConfig:
    system: str = "relay"
    profile: str = "backend-gpt4o"
    prefix_len: int = 5
    threshold: float = 0.5
    tick_ms: int = TICK_MS
    word_duration_ms: float = 400.0
    min_chunk_words: int = 5
    draft_per_word_ms: float = 14.2
    draft_latency_jitter: float = 0.0
    verifier_ms: float = 10.0
    asr_ms: float = 250.0
    first_chunk_ms: float = 841.0
    chunk_interval_ms: float = 120.0
    llm_chunk_words: int = 5
    latency_model: str = "constant"
    latency_sigma: float = 0.3
    inter_turn_silence_ms: float = 200.0
    interruption_overlap_ms: float = 320.0
    tolerance_frames: int = 1
    seed: int = 0
    n_templates: int = 20
    turns_per_script: int = 3
    injection: dict = field(default_factory=dict)
    bad_rate: float = 0.054
    separation: float = 0.35
    draft_noise: float = 1.0
    train_scripts: int = 200
    train_epochs: int = 15
    kfold: int = 5
    max_len: int = 8
    respect_pause: bool = True
    backchannel: bool = False
    scripts: Optional[str] = None
    weights: Optional[str] = None
    labels: Optional[str] = None
    prefixes: Optional[str] = None
    quality_labels: Optional[str] = None
    llm_endpoint: Optional[str] = None
    failing_turns: tuple = ()

    def validate(self) -> "RunConfig":
        if self.system not in SYSTEMS:
            raise ConfigError(f"system must be one of {SYSTEMS}, got {self.system!r}")
        if self.tick_ms != TICK_MS:
            raise ConfigError(f"the tick grid is fixed at {TICK_MS} ms")
        try:
            check_threshold(self.threshold)
            check_prefix_len(self.prefix_len, self.max_len)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("scripts", "weights", "labels", "prefixes", "quality_labels"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{name} path does not exist: {path}")
        for name in ("word_duration_ms", "draft_per_word_ms"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("verifier_ms", "asr_ms", "first_chunk_ms", "chunk_interval_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["failing_turns"] = list(self.failing_turns)
        return d

    @property
    def sink(self) -> TtsSinkModel:
        return TtsSinkModel(self.min_chunk_words, self.word_duration_ms)

    def injection_config(self, seed: Optional[int] = None) -> InjectionConfig:
        kw = dict(
            inter_turn_silence_ms=self.inter_turn_silence_ms,
            interruption_overlap_ms=self.interruption_overlap_ms,
            word_duration_ms=self.word_duration_ms,
            seed=self.seed if seed is None else seed,
        )
        kw.update(self.injection)
        if "interruption_truncation_range" in kw:
            kw["interruption_truncation_range"] = tuple(kw["interruption_truncation_range"])
        return InjectionConfig(**kw)


def default_profiles() -> dict:
    return yaml.safe_load(resources.files("duplexrelay").joinpath("profiles.yaml").read_text(encoding="utf-8"))


def _merge(base: dict, extra: Optional[dict]) -> dict:
    out = dict(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, profile: Optional[str] = None, env=None, **overrides) -> RunConfig:
    """Resolve defaults, the backend profile, a user file, overrides and environment.

    ``DUPLEXRELAY_CONFIG`` names a config file when ``path`` is not given;
    ``DUPLEXRELAY_SEED`` overrides the seed last.
    """
    env = os.environ if env is None else env
    doc = default_profiles()
    path = path or env.get(ENV_CONFIG)
    if path:
        try:
            user = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        doc = _merge(doc, user)
    values = dict(doc.get("defaults", {}))
    name = profile or overrides.get("profile") or values.get("profile")
    backends = doc.get("backends", {})
    if name not in backends:
        raise ConfigError(f"unknown backend profile {name!r}; known: {sorted(backends)}")
    values.update(backends[name])
    values["profile"] = name
    values.update({k: v for k, v in overrides.items() if v is not None})
    if env.get(ENV_SEED):
        values["seed"] = int(env[ENV_SEED])
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    if "failing_turns" in values:
        values["failing_turns"] = tuple(values["failing_turns"])
    return RunConfig(**values).validate()


# -- components ------------------------------------------------------------------------


def _stable(*parts) -> int:
    return int.from_bytes(hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest(), "little")


def template_corpus(config: RunConfig, seed: Optional[int] = None, count: Optional[int] = None, prefix: str = "conv"):
    seed = config.seed if seed is None else seed
    count = config.n_templates if count is None else count
    out = []
    for i in range(count):
        s = _stable(seed, "corpus", i) % (2**31)
        script = template_script(config.turns_per_script, seed=s, script_id=f"{prefix}-{i:04d}",
                                 cfg=config.injection_config(s))
        out.append(inject_all(script, config.injection_config(s)))
    return out


def load_scripts(config: RunConfig) -> list[ConversationScript]:
    if config.scripts:
        scripts = read_scripts(config.scripts)
        if not scripts:
            raise ConfigError(f"no .script files in {config.scripts}")
        return scripts
    return template_corpus(config)


def draft_source(config: RunConfig, trained_on: frozenset = frozenset(), seed: Optional[int] = None):
    if config.prefixes:
        return ScriptedSource(read_prefix_file(config.prefixes), seed=config.seed)
    return StochasticSource(
        bad_rate=config.bad_rate,
        per_word_ms=config.draft_per_word_ms,
        latency_jitter=config.draft_latency_jitter,
        separation=config.separation,
        noise=config.draft_noise,
        seed=config.seed if seed is None else seed,
        trained_on=trained_on,
    )


def label_oracle(config: RunConfig):
    return FileLabelOracle.from_file(config.labels) if config.labels else RuleOracle()


def _training_key(config: RunConfig) -> tuple:
    return (config.seed, config.bad_rate, config.separation, config.draft_noise, config.train_scripts,
            config.train_epochs, config.kfold, config.max_len, config.turns_per_script)


@functools.lru_cache(maxsize=8)
def _train_cached(key: tuple):
    seed, bad_rate, separation, noise, n_scripts, epochs, k, max_len, turns = key
    cfg = RunConfig(seed=seed, bad_rate=bad_rate, separation=separation, draft_noise=noise, max_len=max_len,
                    turns_per_script=turns)
    train_seed = _stable(seed, "verifier-training") % (2**31)
    scripts = template_corpus(cfg, seed=train_seed, count=n_scripts, prefix="train")

    def generator(train_ids, fold):
        return draft_source(cfg, trained_on=train_ids, seed=train_seed)

    data = build_kfold_dataset(scripts, k, generator, RuleOracle(), prefix_len=cfg.prefix_len, seed=train_seed)
    labels = [ex.label for ex in data]
    if len(set(labels)) < 2:
        # tiny corpora can miss the rare class entirely; top up with a higher bad rate
        boosted = dataclasses.replace(cfg, bad_rate=max(0.25, bad_rate))
        data = build_kfold_dataset(scripts, k, lambda ids, f: draft_source(boosted, ids, train_seed), RuleOracle(),
                                   prefix_len=cfg.prefix_len, seed=train_seed)
    est = PrefixVerifier(max_len=max_len, epochs=epochs, random_state=seed)
    return est.fit(data)


def load_verifier(config: RunConfig):
    """Verifier from ``config.weights``, or one trained on an out-of-fold synthetic corpus."""
    if config.weights:
        return PrefixVerifier.from_model(load_model(config.weights), threshold=config.threshold)
    return _train_cached(_training_key(config))


def read_quality_labels(path) -> dict:
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        turn_id, score = (p.strip() for p in line.split("|"))
        value = float(score)
        if not 1 <= value <= 5:
            raise ValueError(f"quality score out of range for {turn_id}: {value}")
        out[turn_id] = value
    return out


@dataclass
class BackchannelSource:
    """One lexicon word per backchannel, drafted as a single-word prefix."""

    per_word_ms: float = 14.2
    hidden_dim: int = 896
    seed: int = 0

    def draft(self, context: DraftContext, max_words: int) -> DraftPrefix:
        rng = np.random.default_rng(_stable(self.seed, "boc", context.script_id, context.fork_tick))
        word = BACKCHANNEL_LEXICON[int(rng.integers(len(BACKCHANNEL_LEXICON)))].split()[0]
        return DraftPrefix((word,), rng.normal(0, 1, (1, self.hidden_dim)), _word_features(rng, 32, 3.0)[None, :],
                           self.per_word_ms, (self.per_word_ms,))


# -- session driver ----------------------------------------------------------------------

_TICK, _FAST, _SLOW = 0, 1, 2


@dataclass
class _Turn:
    record: TurnRecord
    fork_ms: float
    buffer: ResponseBuffer = field(default_factory=ResponseBuffer)
    stream: object = None
    pending: int = 0
    transcript: str = ""
    stp_ms: Optional[float] = None
    closed: bool = False


class _ScriptSession:
    def __init__(self, script, config, verifier, source, oracle, llm, asr, controller):
        self.script = script
        self.config = config
        self.verifier = verifier
        self.source = source
        self.oracle = oracle
        self.llm = llm
        self.asr = asr
        self.controller = controller
        self.sink = config.sink
        self.tracker = TurnTracker(script.script_id)
        self.references = [t.words for t in script.agent_turns()]
        self.history: list[tuple[str, str]] = []
        self.turns: list[TurnRecord] = []
        self.predicted: list[tuple[int, ControlToken]] = []
        self.queue: list = []
        self.seq = 0
        self.active: Optional[_Turn] = None
        self.n_bos = 0
        self.user_at: dict[int, list] = {}
        for e in script.events:
            if e.channel == Channel.USER:
                self.user_at.setdefault(e.tick, []).append(e)

    def push(self, time_ms, priority, *payload):
        heapq.heappush(self.queue, (time_ms, priority, self.seq, payload))
        self.seq += 1

    def run(self):
        state = self.controller.initial()
        last = self.script.last_tick
        self.push(0.0, _TICK, "tick", 0)
        while self.queue:
            time_ms, _, _, payload = heapq.heappop(self.queue)
            if payload[0] == "tick":
                tick = payload[1]
                state = self.on_tick(state, tick)
                busy = state.phase in (Phase.DRAFTING, Phase.SPEAKING) or self.active is not None
                if tick < last or (busy and tick < last + MAX_EXTRA_TICKS):
                    self.push((tick + 1) * TICK_MS, _TICK, "tick", tick + 1)
                elif busy:
                    raise InvariantViolation(f"{self.script.script_id}: response still open after {MAX_EXTRA_TICKS} ticks")
            else:
                state = self.on_delivery(state, time_ms, payload)
        if self.active is not None:
            self.close(self.active)
        return self.turns, self.predicted

    def on_tick(self, state, tick):
        events = self.user_at.get(tick, [])
        for e in events:
            self.tracker.observe(e)
        words = [e.payload for e in events if is_word(e.payload)]
        user_event = words[0] if words else (events[0].payload if events else None)
        state, token = self.controller.step(state, tick, user_event)
        if token != ControlToken.SIL:
            self.predicted.append((tick, token))
        if token == ControlToken.BOS:
            state = self.start_response(state, tick)
        elif token == ControlToken.BOC:
            state = self.start_backchannel(state, tick)
        elif token == ControlToken.STP:
            self.barge_in(tick)
        elif token == ControlToken.EOS and self.active is not None:
            self.close(self.active)
        if self.active is not None and self.active.record.kind == "backchannel" and state.phase == Phase.LISTENING:
            self.close(self.active)
        return state

    # -- turn lifecycle ------------------------------------------------------------------
    def start_response(self, state, tick):
        cfg = self.config
        self.tracker.mark_bos(tick)
        k = self.n_bos
        self.n_bos += 1
        user = trigger(self.tracker, tick)
        ref = self.references[k] if k < len(self.references) else None
        ctx = DraftContext(self.script.script_id, k, tick, user.words, tuple(self.history), ref)
        turn = _Turn(TurnRecord(self.script.script_id, ctx.turn_id, "response", cfg.system, tick), tick * TICK_MS)
        self.active = turn
        t0 = turn.fork_ms
        llm = self.llm
        if ctx.turn_id in cfg.failing_turns:
            llm = SimulatedLlm(fail=True)

        commit_prefix = None
        request_ms = 0.0
        if cfg.system == "s2s_only":
            handle = fork(state, tick, self.source, max(len(ref or ()), cfg.prefix_len, 1), ctx)
            state = handle.main_stream
            turn.stream = handle.speculative_stream
            prefix = turn.stream.draft()
            lat = latency("s2s_only", dict(t_generate=math.fsum(prefix.word_latencies_ms[: cfg.min_chunk_words])))
            turn.record.latency = lat
            turn.record.prefix_words = prefix.words
            turn.pending = 1
            self.push(t0 + lat.total, _FAST, "fast", turn)
            return state
        if cfg.system == "relay":
            handle = fork(state, tick, self.source, cfg.prefix_len, ctx)
            state = handle.main_stream
            turn.stream = handle.speculative_stream
            prefix = turn.stream.draft()
            c = float(self.verifier.confidence([prefix])[0])
            turn.record.confidence = c
            turn.record.prefix_words = prefix.words
            if self.oracle is not None:
                turn.record.label = int(self.oracle.label(ctx, prefix))
            if bool(commit_mask(c, cfg.threshold)):
                turn.record.outcome = "commit"
                lat = latency("commit", dict(t_generate=prefix.draft_duration_ms, t_verifier=cfg.verifier_ms))
                turn.record.latency = lat
                commit_prefix = prefix.words
                request_ms = lat.total
                turn.pending += 1
                self.push(t0 + lat.total, _FAST, "fast", turn)
            else:
                turn.record.outcome = "fallback"
                turn.stream.discard()

        try:
            result = generate(self.asr, llm, user, self.history, commit_prefix)
        except FallbackExhaustedError as exc:
            logger.warning("%s", exc)
            turn.record.outcome = "failed"
            turn.record.error = exc.diagnostic
            turn.record.latency = None
            if turn.stream is not None:
                turn.stream.discard()
            turn.pending = 0
            turn.transcript = " ".join(user.words)
            return self.controller.schedule_end(state, tick + 1)
        turn.transcript = result.transcript
        if turn.record.outcome in ("fallback", "cascaded"):
            mode = "fallback" if cfg.system == "relay" else "cascaded"
            turn.record.latency = latency(mode, dict(t_asr=result.t_asr_ms, t_generate=result.t_generate_ms))
        # a prefix-conditioned request cannot leave before the prefix exists
        delay = max(0.0, request_ms - result.t_asr_ms) if commit_prefix else 0.0
        for words, arrival in result.chunks:
            turn.pending += 1
            self.push(t0 + arrival + delay, _SLOW, "slow", turn, words)
        if turn.pending == 0:
            state = self.controller.schedule_end(state, tick + 1)
        return state

    def start_backchannel(self, state, tick):
        if self.active is not None:
            self.close(self.active)
        ctx = DraftContext(self.script.script_id, -1, tick, (), tuple(self.history))
        src = BackchannelSource(self.config.draft_per_word_ms, seed=self.config.seed)
        handle = fork(state, tick, src, 1, ctx)
        turn_id = f"{self.script.script_id}:boc{tick}"
        turn = _Turn(TurnRecord(self.script.script_id, turn_id, "backchannel", "backchannel", tick), tick * TICK_MS)
        turn.stream = handle.speculative_stream
        turn.stream.draft()
        turn.pending = 1
        self.active = turn
        self.push(turn.fork_ms + turn.stream.draft().draft_duration_ms, _FAST, "fast", turn)
        return self.controller.schedule_end(handle.main_stream, tick + 1)

    def on_delivery(self, state, time_ms, payload):
        kind, turn = payload[0], payload[1]
        turn.pending -= 1
        if turn.closed and turn.stp_ms is None:
            return state
        if kind == "fast":
            try:
                words = turn.stream.release()
            except DiscardedDraftError:
                turn.record.discarded_after_stp += len(turn.stream.draft().words)
                return state
            if turn.stp_ms is not None and time_ms >= turn.stp_ms:
                raise InvariantViolation(f"{turn.record.turn_id}: speculative words released after STP")
            turn.buffer.add_fast(words, time_ms)
            if turn is self.active and state.phase in (Phase.DRAFTING, Phase.SPEAKING):
                # the main stream hears its own committed words as agent-side history
                state = self.controller.consume(state, words)
        else:
            turn.buffer.add_slow(payload[2], time_ms)
        if turn.pending == 0 and not turn.closed and turn is self.active and turn.record.kind == "response":
            end_ms = drain(turn.buffer, self.sink).end_ms
            current = int(time_ms // TICK_MS)
            end_tick = current + 1 if end_ms is None else max(math.ceil(end_ms / TICK_MS), current + 1)
            if state.phase in (Phase.DRAFTING, Phase.SPEAKING):
                state = self.controller.schedule_end(state, end_tick)
        if state.phase == Phase.DRAFTING and turn is self.active and turn.buffer.segments:
            state = self.controller.begin_speaking(state)
        return state

    def barge_in(self, tick):
        turn = self.active
        if turn is None:
            return
        stp_ms = tick * TICK_MS
        if turn.stream is not None:
            turn.stream.discard()
        active = True if turn.pending > 0 else None
        turn.buffer = truncate_on_stp(turn.buffer, stp_ms, self.sink, utterance_active=active)
        turn.stp_ms = stp_ms
        self.close(turn)

    def close(self, turn: _Turn):
        if turn.closed:
            return
        turn.closed = True
        rec = turn.record
        timeline = drain(turn.buffer, self.sink)
        rec.words = timeline.words
        rec.intervals = timeline.to_records()
        rec.gaps = [tuple(g) for g in timeline.gaps]
        rec.onset_ms = timeline.onset_ms
        rec.truncated_at_ms = turn.buffer.truncated_at
        if rec.outcome == "commit":
            slow_ready = [r for r, _, src in _chunks(turn.buffer, self.sink) if src == SLOW]
            if slow_ready and timeline.onset_ms is not None:
                rec.relay_margin_ms = relay_margin(len(rec.prefix_words), timeline.onset_ms, self.sink.word_duration_ms,
                                                   slow_ready[0])
        if rec.truncated_at_ms is not None:
            wd = self.sink.word_duration_ms
            late = [w for s, w in timeline.word_starts(wd) if s >= rec.truncated_at_ms]
            if late:
                raise InvariantViolation(f"{rec.turn_id}: words scheduled at or after STP: {late}")
        if rec.kind == "response":
            self.history.append(("User", turn.transcript))
            if rec.words:
                self.history.append(("Assistant", " ".join(rec.words)))
        self.turns.append(rec)
        if self.active is turn:
            self.active = None


def _llm_for(config: RunConfig, script: ConversationScript):
    if config.llm_endpoint:
        return HttpLlmClient(config.llm_endpoint)
    kind = config.latency_model
    return SimulatedLlm(
        responder=ReferenceResponder([t.words for t in script.agent_turns()]),
        first_chunk=LatencyModel(config.first_chunk_ms, kind, config.latency_sigma),
        chunk_interval=LatencyModel(config.chunk_interval_ms, kind, config.latency_sigma),
        chunk_words=config.llm_chunk_words,
        seed=config.seed,
    )


def simulate(
    config: RunConfig,
    scripts: Optional[Sequence[ConversationScript]] = None,
    verifier=None,
    source=None,
    oracle=None,
    llm_factory: Optional[Callable] = None,
) -> SessionLog:
    """Replay every script and collect the raw session log."""
    config.validate()
    scripts = list(scripts) if scripts is not None else load_scripts(config)
    for s in scripts:
        problems = validate_script(s)
        if problems:
            raise InvariantViolation(f"script {s.script_id} is invalid: {problems[0]}")
    if config.system == "relay" and verifier is None:
        verifier = load_verifier(config)
    source = source or draft_source(config)
    oracle = oracle if oracle is not None else label_oracle(config)
    asr = SimulatedAsr(LatencyModel(config.asr_ms, config.latency_model, config.latency_sigma), seed=config.seed)
    controller = DuplexController(
        word_ticks=max(1, int(config.word_duration_ms / TICK_MS + 0.5)),
        respect_pause=config.respect_pause,
        backchannel=config.backchannel,
    )
    log = SessionLog(config.system, config=config.to_dict())
    for script in scripts:
        llm = llm_factory(script) if llm_factory else _llm_for(config, script)
        sess = _ScriptSession(script, config, verifier, source, oracle, llm, asr, controller)
        turns, predicted = sess.run()
        log.turns.extend(turns)
        log.predicted_events[script.script_id] = predicted
        log.reference_events[script.script_id] = list(script.reference_actions)
    return log


def run_session(config: RunConfig, scripts=None, verifier=None, source=None, oracle=None, llm_factory=None,
                out=None) -> SessionReport:
    log = simulate(config, scripts, verifier, source, oracle, llm_factory)
    quality = read_quality_labels(config.quality_labels) if config.quality_labels else None
    report = session_report(log, quality, config.tolerance_frames)
    if out is not None:
        Path(out).write_text(report.dumps(), encoding="utf-8")
    return report


# -- sweeps ------------------------------------------------------------------------------

SWEEP_COLUMNS = ("threshold", "prefix_len", "commit_rate", "fallback_rate", "bad_commit_rate", "good_commit_rate",
                 "ungated_bad_rate", "p90_onset_ms")


def check_monotone(rows: Sequence[dict]) -> list[str]:
    """Violations of the threshold ordering within each prefix length."""
    problems = []
    for n in sorted({r["prefix_len"] for r in rows}):
        cells = sorted((r for r in rows if r["prefix_len"] == n), key=lambda r: r["threshold"])
        for a, b in zip(cells, cells[1:]):
            for key in ("commit_rate", "bad_commit_rate", "good_commit_rate"):
                if a[key] is not None and b[key] is not None and b[key] > a[key]:
                    problems.append(f"N={n}: {key} rises from {a[key]} to {b[key]} between tau {a['threshold']} and {b['threshold']}")
            if a["fallback_rate"] is not None and b["fallback_rate"] is not None and b["fallback_rate"] < a["fallback_rate"]:
                problems.append(f"N={n}: fallback_rate falls between tau {a['threshold']} and {b['threshold']}")
    return problems


def run_sweep(config: RunConfig, thresholds: Sequence[float], prefix_lens: Sequence[int], scripts=None,
              verifier=None, source=None, oracle=None):
    """One row per (threshold, prefix length) cell, plus the full reports."""
    if not thresholds or not prefix_lens:
        raise ConfigError("sweep needs at least one threshold and one prefix length")
    scripts = list(scripts) if scripts is not None else load_scripts(config)
    if config.system == "relay" and verifier is None:
        verifier = load_verifier(config)
    rows, reports = [], []
    for n in prefix_lens:
        for tau in thresholds:
            cfg = config.replace(threshold=tau, prefix_len=n)
            report = run_session(cfg, scripts, verifier, source, oracle)
            s = report.summary
            rows.append(dict(
                threshold=tau, prefix_len=n, commit_rate=s["commit_rate"], fallback_rate=s["fallback_rate"],
                bad_commit_rate=s["bad_commit_rate"], good_commit_rate=s["good_commit_rate"],
                ungated_bad_rate=s["ungated_bad_rate"], p90_onset_ms=report.outputs["p90_onset_ms"],
            ))
            reports.append(report)
    problems = check_monotone(rows)
    if problems:
        raise InvariantViolation("; ".join(problems))
    return rows, reports


def sweep_csv(rows: Sequence[dict]) -> str:
    lines = [",".join(SWEEP_COLUMNS)]
    for r in rows:
        lines.append(",".join("" if r[c] is None else repr(r[c]) for c in SWEEP_COLUMNS))
    return "\n".join(lines) + "\n"


# -- corpus ------------------------------------------------------------------------------


def generate_corpus(config: RunConfig, out_dir, manifest_name: str = "manifest.json") -> dict:
    """Write injected scripts and a manifest of their seeds; deterministic per seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records: list = []
    entries = []
    if config.scripts:
        sources = [(s, _stable(config.seed, "inject", s.script_id) % (2**31)) for s in read_scripts(config.scripts)]
    else:
        sources = []
        for i in range(config.n_templates):
            s = _stable(config.seed, "corpus", i) % (2**31)
            sources.append((template_script(config.turns_per_script, seed=s, script_id=f"conv-{i:04d}",
                                            cfg=config.injection_config(s)), s))
    for script, seed in sources:
        entry = dict(script_id=script.script_id, seed=seed)
        try:
            injected = inject_all(script, config.injection_config(seed), records)
            path = out_dir / f"{script.script_id}.script"
            write_script(injected, path)
            entry["path"] = path.name
        except (OSError, ValueError, AssertionError) as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
            logger.error("corpus entry %s failed: %s", script.script_id, exc)
        entries.append(entry)
    manifest = dict(
        config=config.to_dict(),
        injection=config.injection_config().to_dict(),
        entries=entries,
        records=records,
    )
    (out_dir / manifest_name).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest


def regenerate_corpus(manifest_path, out_dir) -> dict:
    """Rebuild a corpus from its manifest's stored configuration."""
    doc = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    values = dict(doc["config"])
    values["failing_turns"] = tuple(values.get("failing_turns", ()))
    return generate_corpus(RunConfig(**values), out_dir)
