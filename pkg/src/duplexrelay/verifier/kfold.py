"""Out-of-fold construction of labeled verifier training data."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from ..fast_path import OFF_TOPIC, DraftContext, DraftPrefix, DraftSource
from ..timeline import ConversationScript
from .focal import BAD, GOOD, as_label


class PartitionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledPrefix:
    prefix: DraftPrefix
    label: int
    fold: int
    script_id: str
    turn_id: str
    generator_fold: int
    generator_trained_on: frozenset = frozenset()


class LabelOracle(Protocol):
    def label(self, context: DraftContext, prefix: DraftPrefix) -> int:
        ...


def _norm(word: str) -> str:
    return word.lower().strip(",.?!;:\"'")


class RuleOracle:
    """Good iff the draft reproduces the reference opening.

    Without a reference, a draft is good unless it contains off-topic
    filler words.
    """

    def label(self, context: DraftContext, prefix: DraftPrefix) -> int:
        words = [_norm(w) for w in prefix.words]
        if context.reference_words:
            ref = [_norm(w) for w in context.reference_words[: len(words)]]
            return GOOD if words == ref else BAD
        return BAD if any(w in OFF_TOPIC for w in words) else GOOD


class FileLabelOracle:
    """Ground-truth labels read from ``turn_id | label`` or ``turn_id | prefix_len | label`` records."""

    def __init__(self, labels: dict):
        self.labels = labels

    @classmethod
    def from_file(cls, path) -> "FileLabelOracle":
        labels = {}
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split("|")]
            if len(parts) == 2:
                labels[(parts[0], None)] = as_label(parts[1])
            elif len(parts) == 3:
                labels[(parts[0], int(parts[1]))] = as_label(parts[2])
            else:
                raise ValueError(f"bad label record: {raw!r}")
        return cls(labels)

    def label(self, context: DraftContext, prefix: DraftPrefix) -> int:
        key = (context.turn_id, len(prefix))
        if key in self.labels:
            return self.labels[key]
        key = (context.turn_id, None)
        if key not in self.labels:
            raise KeyError(f"no label for turn {context.turn_id}")
        return self.labels[key]


def assign_folds(n_items: int, k: int, seed: Optional[int] = None) -> np.ndarray:
    """Fold id per item; sizes differ by at most one."""
    if k < 2:
        raise PartitionError("K must be at least 2")
    if k > n_items:
        raise PartitionError(f"K={k} exceeds the number of scripts ({n_items})")
    order = np.arange(n_items) if seed is None else np.random.default_rng(seed).permutation(n_items)
    folds = np.empty(n_items, dtype=int)
    folds[order] = np.arange(n_items) % k
    return folds


def turn_contexts(script: ConversationScript):
    """Draft contexts for every agent turn, as seen at each reference BOS."""
    users = script.user_turns()
    history = []
    out = []
    for turn in script.agent_turns():
        user_words = users[turn.index].words if turn.index < len(users) else ()
        out.append(
            DraftContext(
                script_id=script.script_id,
                turn_index=turn.index,
                fork_tick=turn.bos_tick,
                user_words=user_words,
                history=tuple(history),
                reference_words=turn.words,
            )
        )
        history += [("User", " ".join(user_words)), ("Assistant", " ".join(turn.words))]
    return out


GeneratorFactory = Callable[[frozenset, int], DraftSource]


def build_kfold_dataset(
    scripts: Sequence[ConversationScript],
    k: int,
    generator: GeneratorFactory,
    oracle: LabelOracle,
    prefix_len: int = 5,
    seed: Optional[int] = None,
) -> list[LabeledPrefix]:
    """Label one drafted prefix per agent turn using out-of-fold generators.

    ``generator(train_ids, fold)`` must return a draft source built only
    from the scripts in ``train_ids``, i.e. every fold except ``fold``.
    """
    ids = [s.script_id for s in scripts]
    if len(set(ids)) != len(ids):
        raise PartitionError("script ids must be unique")
    folds = assign_folds(len(scripts), k, seed)
    out = []
    for fold in range(k):
        train_ids = frozenset(i for i, f in zip(ids, folds) if f != fold)
        source = generator(train_ids, fold)
        for script, f in zip(scripts, folds):
            if f != fold:
                continue
            for ctx in turn_contexts(script):
                prefix = source.draft(ctx, prefix_len)
                out.append(
                    LabeledPrefix(
                        prefix=prefix,
                        label=as_label(oracle.label(ctx, prefix)),
                        fold=int(f),
                        script_id=script.script_id,
                        turn_id=ctx.turn_id,
                        generator_fold=fold,
                        generator_trained_on=train_ids,
                    )
                )
    return out


def leakage_violations(dataset: Sequence[LabeledPrefix]) -> list[str]:
    """Examples whose generator saw their own script, or was built for another fold."""
    bad = []
    for ex in dataset:
        if ex.script_id in ex.generator_trained_on:
            bad.append(f"{ex.turn_id}: generator trained on its own script")
        if ex.generator_fold != ex.fold:
            bad.append(f"{ex.turn_id}: fold {ex.fold} labeled by generator for fold {ex.generator_fold}")
    return bad
