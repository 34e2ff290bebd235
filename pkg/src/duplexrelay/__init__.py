"""Hybrid duplex speech-to-speech control plane, simulated on a virtual clock.

A duplex controller forks a speculative draft at response onset, a small
verifier gates the drafted prefix, and a cascaded ASR/LLM path continues
from the committed words behind a relay buffer.
"""
from .timeline import TICK_MS, Channel, ControlToken, ConversationScript, TimedEvent, validate_script
from .metrics import latency, p90, score_events, session_report
from .verifier import PrefixVerifier

__version__ = "0.1.0"

__all__ = [
    "TICK_MS", "Channel", "ControlToken", "ConversationScript", "PrefixVerifier", "TimedEvent", "latency", "p90",
    "score_events", "session_report", "validate_script", "__version__",
]
