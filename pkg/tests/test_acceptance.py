"""Exit criteria, one group of tests per numbered criterion.

A summary line per criterion is printed at the end of the pytest run.
"""
import math
import random
import time
from collections import Counter
from functools import lru_cache

import numpy as np
import pytest

from duplexrelay.fast_path import StochasticSource
from duplexrelay.harness import load_config, load_verifier, run_session, run_sweep, template_corpus
from duplexrelay.metrics import match_ticks, score_events
from duplexrelay.relay_buffer import ResponseBuffer, TtsSinkModel, drain, relay_margin
from duplexrelay.timeline import ControlToken
from duplexrelay.verifier import (
    BAD,
    GOOD,
    FocalLossConfig,
    PrefixVerifier,
    RuleOracle,
    assign_folds,
    build_kfold_dataset,
    focal_loss,
    init_model,
    leakage_violations,
    ranking_metrics,
)
from duplexrelay.verifier.network import backward_batch, forward_batch

pytestmark = pytest.mark.acceptance

PROFILES = {"backend-0.5b": 420, "backend-7b": 513, "backend-gpt4o": 1091}


def _onsets(report, outcome):
    decisions = {t["turn_id"]: t["outcome"] for t in report.decisions["turns"]}
    return [t["onset_latency_ms"] for t in report.outputs["turns"] if decisions[t["turn_id"]] == outcome]


# -- 1 -------------------------------------------------------------------------------------


@pytest.mark.criterion(1)
@pytest.mark.parametrize("profile", sorted(PROFILES))
def test_latency_composition(profile, verifier):
    cfg = load_config(env={}, profile=profile, n_templates=334, train_scripts=120, train_epochs=10)
    scripts = template_corpus(cfg)
    started = time.perf_counter()
    commit = run_session(cfg.replace(threshold=0.0), scripts=scripts, verifier=verifier)
    elapsed = time.perf_counter() - started
    cascaded = run_session(cfg.replace(system="cascaded"), scripts=scripts)

    assert commit.outputs["n_turns"] >= 1000
    assert elapsed < 10.0, f"{commit.outputs['n_turns']} turns took {elapsed:.2f} s"
    assert set(_onsets(commit, "commit")) == {81.0}
    assert set(_onsets(cascaded, "cascaded")) == {float(PROFILES[profile])}
    assert cascaded.outputs["p90_onset_ms"] == PROFILES[profile]


@pytest.mark.criterion(1)
def test_fallback_turns_pay_the_cascaded_price(verifier):
    cfg = load_config(env={}, n_templates=40, train_scripts=120, train_epochs=10, bad_rate=0.3)
    rep = run_session(cfg, verifier=verifier)
    assert set(_onsets(rep, "commit")) == {81.0}
    assert set(_onsets(rep, "fallback")) == {1091.0}


# -- 2 -------------------------------------------------------------------------------------


def _random_problem(rng):
    dm = int(rng.integers(2, 6))
    d, ff, max_len = dm + int(rng.integers(1, 4)), int(rng.integers(2, 7)), int(rng.integers(1, 5))
    model = init_model(d, dm, ff, max_len, seed=int(rng.integers(1 << 30)))
    for k in model.params:
        model.params[k] = model.params[k] + rng.normal(0, 0.3, model.params[k].shape)
    B, n = int(rng.integers(1, 4)), int(rng.integers(1, max_len + 1))
    hidden, scalars = rng.normal(0, 1, (B, n, d)), rng.normal(0, 1, (B, n, 3))
    mask = np.ones((B, n), dtype=bool)
    for b in range(B):
        mask[b, int(rng.integers(1, n + 1)):] = False
    labels = rng.integers(0, 2, B)
    cfg = FocalLossConfig(float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.1, 0.9)), float(rng.uniform(0, 3)))
    return model, hidden, scalars, mask, labels, cfg


def _loss(model, hidden, scalars, mask, labels, cfg):
    c = forward_batch(model, hidden, scalars, mask)
    return float(focal_loss(c, labels, cfg)[0].sum())


@pytest.mark.criterion(2)
def test_analytic_gradients_match_finite_differences():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(25):
        model, hidden, scalars, mask, labels, cfg = _random_problem(rng)
        c, cache = forward_batch(model, hidden, scalars, mask, return_cache=True)
        _, dc = focal_loss(c, labels, cfg)
        grads = backward_batch(model, cache, dc * c * (1 - c))
        analytic, numeric = [], []
        h = 1e-6
        for name, value in model.params.items():
            for idx in np.ndindex(value.shape):
                old = value[idx]
                value[idx] = old + h
                up = _loss(model, hidden, scalars, mask, labels, cfg)
                value[idx] = old - h
                down = _loss(model, hidden, scalars, mask, labels, cfg)
                value[idx] = old
                analytic.append(grads[name][idx])
                numeric.append((up - down) / (2 * h))
        a, n = np.array(analytic), np.array(numeric)
        rel = np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-300)
        worst = max(worst, rel)
    assert worst < 1e-4, worst


@pytest.mark.criterion(2)
def test_focal_reduces_to_cross_entropy():
    rng = np.random.default_rng(0)
    c = rng.uniform(1e-6, 1 - 1e-6, 1000)
    y = rng.integers(0, 2, 1000)
    loss, _ = focal_loss(c, y, FocalLossConfig(alpha_good=1.0, alpha_bad=1.0, gamma=0.0))
    bce = -(y * np.log(c) + (1 - y) * np.log(1 - c))
    assert np.max(np.abs(loss - bce)) <= 1e-12


@pytest.mark.criterion(2)
def test_single_token_pooling_is_layer_norm_of_that_token():
    rng = np.random.default_rng(1)
    model = init_model(12, 6, 8, 4, seed=3)
    for k in model.params:
        model.params[k] = model.params[k] + rng.normal(0, 0.5, model.params[k].shape)
    hidden, scalars = rng.normal(0, 1, (3, 4, 12)), rng.normal(0, 1, (3, 4, 3))
    mask = np.zeros((3, 4), dtype=bool)
    mask[:, 0] = True
    _, cache = forward_batch(model, hidden, scalars, mask, return_cache=True)
    g, b = model.params["ln_pool_g"], model.params["ln_pool_b"]
    for i in range(3):
        z1 = cache["z"][i, 0]
        expected = (z1 - z1.mean()) / math.sqrt(z1.var() + 1e-5) * g + b
        assert np.max(np.abs(cache["p"][i] - expected)) <= 1e-12


@pytest.mark.criterion(2)
def test_scalar_features_bypass_a_closed_gate():
    rng = np.random.default_rng(5)
    model = init_model(10, 6, 8, 4, seed=9)
    for k in model.params:
        model.params[k] = model.params[k] + rng.normal(0, 0.5, model.params[k].shape)
    model.params["b_g"][:] = -60.0  # gate ~1e-26: hidden-state path switched off
    hidden, scalars = rng.normal(0, 1, (1, 3, 10)), rng.normal(0, 1, (1, 3, 3))
    mask = np.ones((1, 3), dtype=bool)

    def sensitivity(m):
        h = 1e-5
        out = []
        for idx in np.ndindex(scalars.shape):
            s_up, s_dn = scalars.copy(), scalars.copy()
            s_up[idx] += h
            s_dn[idx] -= h
            out.append((forward_batch(m, hidden, s_up, mask)[0] - forward_batch(m, hidden, s_dn, mask)[0]) / (2 * h))
        return np.abs(out)

    _, cache = forward_batch(model, hidden, scalars, mask, return_cache=True)
    assert cache["gate"].max() < 1e-20
    assert sensitivity(model).max() > 1e-4
    blocked = model.copy()
    blocked.params["W_a"][:] = 0.0
    assert sensitivity(blocked).max() < 1e-9


# -- 3 -------------------------------------------------------------------------------------


def _kfold_data(cfg, seed, count, prefix):
    scripts = template_corpus(cfg, seed=seed, count=count, prefix=prefix)

    def generator(train_ids, fold):
        return StochasticSource(bad_rate=0.054, separation=1.0, seed=seed, trained_on=train_ids)

    return build_kfold_dataset(scripts, 5, generator, RuleOracle(), prefix_len=5, seed=seed)


@pytest.mark.criterion(3)
def test_training_on_separable_data():
    cfg = load_config(env={}, turns_per_script=3)
    train_set = _kfold_data(cfg, 11, 500, "train")
    test_set = _kfold_data(cfg, 12, 250, "test")
    bad_share = sum(ex.label == BAD for ex in train_set) / len(train_set)
    assert 0.03 < bad_share < 0.08

    started = time.perf_counter()
    est = PrefixVerifier(epochs=15, random_state=0).fit(train_set)
    elapsed = time.perf_counter() - started

    conf = est.confidence(test_set)
    labels = np.array([ex.label for ex in test_set])
    auroc, _ = ranking_metrics(conf, labels)
    bad_recall = float(np.mean(conf[labels == BAD] < 0.5))
    print(f"train {len(train_set)} / test {len(test_set)}, {elapsed:.1f} s, AUROC {auroc:.4f}, bad recall {bad_recall:.3f}")
    assert elapsed < 60.0
    assert auroc >= 0.95
    assert bad_recall > 0.5


# -- 4 -------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def rough_verifier():
    # two epochs: confidences spread across the unit interval, so every threshold matters
    return load_verifier(load_config(env={}, train_scripts=60, train_epochs=2))


@pytest.mark.criterion(4)
@pytest.mark.parametrize("seed", range(5))
def test_threshold_sweep_is_monotone(seed, rough_verifier):
    cfg = load_config(env={}, seed=seed, n_templates=30, bad_rate=0.3, separation=0.0)
    rows, _ = run_sweep(cfg, [0.25, 0.5, 0.75], [5], verifier=rough_verifier)
    for key, direction in (("bad_commit_rate", -1), ("good_commit_rate", -1), ("fallback_rate", 1)):
        values = [r[key] for r in rows]
        assert None not in values
        assert all(direction * (b - a) >= 0 for a, b in zip(values, values[1:])), (key, values)
    bad = [r["bad_commit_rate"] for r in rows]
    assert bad[0] > bad[-1]


# -- 5 -------------------------------------------------------------------------------------


@pytest.mark.criterion(5)
def test_gap_iff_negative_relay_margin():
    rng = random.Random(5)
    negative = 0
    for _ in range(2000):
        n = rng.randint(1, 8)
        wd = rng.randint(100, 800)
        onset = rng.randint(0, 2000)
        slow = onset + rng.randint(0, 8000)
        sink = TtsSinkModel(rng.randint(1, 8), wd)
        buf = ResponseBuffer()
        buf.add_fast(tuple(f"p{i}" for i in range(n)), onset)
        buf.add_slow(tuple(f"s{i}" for i in range(rng.randint(1, 12))), slow)
        tl = drain(buf, sink)
        margin = relay_margin(n, onset, wd, slow)
        assert tl.seamless == (margin >= 0)
        if margin < 0:
            negative += 1
            (a, b), = tl.gaps
            assert b - a == -margin
    assert 100 < negative < 1900


# -- 6 -------------------------------------------------------------------------------------


def _check_barge_in(report, word_ms=400.0):
    truncated = 0
    for turn in report.outputs["turns"]:
        stp = turn["truncated_at_ms"]
        if stp is None:
            continue
        truncated += 1
        for iv in turn["intervals"]:
            starts = [iv["start_ms"] + i * word_ms for i in range(len(iv["words"]))]
            assert all(s < stp for s in starts), (turn["turn_id"], starts, stp)
            if iv["source"] == "fast":
                assert iv["start_ms"] < stp
    return truncated


@pytest.mark.criterion(6)
def test_no_speech_after_stp(verifier):
    cfg = load_config(env={}, n_templates=1000, turns_per_script=2, train_scripts=120, train_epochs=10,
                      injection=dict(interruption_rate=1.0), latency_model="lognormal")
    scripts = template_corpus(cfg)
    assert sum(1 for s in scripts for _, tok in s.reference_actions if tok == ControlToken.STP) >= 1000
    for system in ("relay", "cascaded"):
        rep = run_session(cfg.replace(system=system), scripts=scripts, verifier=verifier)
        assert _check_barge_in(rep) >= 1000


@pytest.mark.criterion(6)
def test_discarded_drafts_never_play(verifier):
    # a slow draft and an interruption one tick after onset: STP lands before the prefix is ready
    cfg = load_config(env={}, n_templates=200, train_scripts=120, train_epochs=10, draft_per_word_ms=100.0,
                      threshold=0.0, injection=dict(interruption_rate=1.0, interruption_truncation_range=[0.01, 0.05]))
    rep = run_session(cfg, verifier=verifier)
    assert rep.summary["discarded_after_stp"] > 0
    by_id = {t["turn_id"]: t for t in rep.decisions["turns"]}
    for turn in rep.outputs["turns"]:
        if by_id[turn["turn_id"]]["discarded_after_stp"]:
            assert not any(iv["source"] == "fast" for iv in turn["intervals"])
    _check_barge_in(rep)


# -- 7 -------------------------------------------------------------------------------------


def _optimal(preds, refs, tol):
    @lru_cache(maxsize=None)
    def best(i, used):
        if i == len(refs):
            return 0
        out = best(i + 1, used)
        for j, p in enumerate(preds):
            if not used >> j & 1 and abs(p - refs[i]) <= tol:
                out = max(out, 1 + best(i + 1, used | 1 << j))
        return out

    return best(0, 0)


@pytest.mark.criterion(7)
def test_greedy_cardinality_is_optimal():
    rng = random.Random(7)
    for _ in range(1000):
        total = rng.randint(0, 20)
        k = rng.randint(0, total)
        span = rng.randint(1, 30)
        preds = tuple(rng.randint(0, span) for _ in range(k))
        refs = tuple(rng.randint(0, span) for _ in range(total - k))
        tol = rng.randint(0, 3)
        assert len(match_ticks(preds, refs, tol)) == _optimal(preds, refs, tol)


@pytest.mark.criterion(7)
@pytest.mark.parametrize(
    "pred,ref,tol,expected",
    [
        # 2 of 3 predictions matched, both references found: P 2/3, R 1, F1 0.8
        ([10, 20, 40], [11, 19], 1, (2 / 3, 1.0, 0.8)),
        # 1 of 2 predictions, 1 of 4 references: P 1/2, R 1/4, F1 1/3
        ([5, 50], [6, 20, 30, 60], 1, (0.5, 0.25, 1 / 3)),
        # nothing within reach: everything 0
        ([0, 10], [3, 13], 2, (0.0, 0.0, 0.0)),
    ],
)
def test_prf_by_hand(pred, ref, tol, expected):
    s = score_events([(t, "BOS") for t in pred], [(t, "BOS") for t in ref], tol).per_type["BOS"]
    assert (s.precision, s.recall, s.f1) == pytest.approx(expected, abs=1e-15)


# -- 8 -------------------------------------------------------------------------------------


@pytest.mark.criterion(8)
@pytest.mark.parametrize("k", [2, 5, 10])
def test_kfold_integrity(k):
    cfg = load_config(env={})
    scripts = template_corpus(cfg, count=37, prefix="kf")
    built = {}

    def generator(train_ids, fold):
        built[fold] = train_ids
        return StochasticSource(bad_rate=0.2, seed=1, trained_on=train_ids)

    data = build_kfold_dataset(scripts, k, generator, RuleOracle(), seed=4)
    folds = assign_folds(len(scripts), k, 4)
    sizes = Counter(folds.tolist())
    assert len(sizes) == k and max(sizes.values()) - min(sizes.values()) <= 1
    fold_of = {s.script_id: int(f) for s, f in zip(scripts, folds)}
    for ex in data:
        assert ex.fold == fold_of[ex.script_id]
        assert ex.script_id not in built[ex.fold]
        assert not any(fold_of[sid] == ex.fold for sid in built[ex.fold])
    assert leakage_violations(data) == []
    assert {ex.script_id for ex in data} == set(fold_of)


# -- 9 -------------------------------------------------------------------------------------


@pytest.mark.criterion(9)
@pytest.mark.parametrize("seed,profile,injection", [
    (0, "backend-gpt4o", {}),
    (1, "backend-0.5b", dict(interruption_rate=0.5, pause_insertion_rate=0.5)),
    (2, "backend-7b", dict(interruption_rate=1.0)),
])
def test_threshold_one_is_cascaded(seed, profile, injection, verifier):
    cfg = load_config(env={}, seed=seed, profile=profile, n_templates=40, train_scripts=120, train_epochs=10,
                      injection=injection, latency_model="lognormal")
    relay = run_session(cfg.replace(threshold=1.0), verifier=verifier)
    cascaded = run_session(cfg.replace(system="cascaded"))
    assert relay.summary["fallback_rate"] == 1.0
    assert relay.outputs_text().encode() == cascaded.outputs_text().encode()
    again = run_session(cfg.replace(threshold=1.0), verifier=verifier)
    assert again.dumps().encode() == relay.dumps().encode()


# -- 10 ------------------------------------------------------------------------------------


@pytest.mark.criterion(10)
def test_quality_and_commit_rates_from_label_files(tmp_path, verifier):
    cfg = load_config(env={}, n_templates=20, train_scripts=120, train_epochs=10)
    scripts = template_corpus(cfg)
    ids = [f"{s.script_id}:{k}" for s in scripts for k in range(len(s.agent_turns()))]
    rng = random.Random(10)
    labels = {tid: rng.choice(["good", "good", "bad"]) for tid in ids}
    scores = {tid: rng.randint(1, 5) for tid in ids[::2]}
    (tmp_path / "labels.txt").write_text("".join(f"{t} | {v}\n" for t, v in labels.items()))
    (tmp_path / "quality.txt").write_text("# turn | score\n" + "".join(f"{t} | {v}\n" for t, v in scores.items()))

    rep = run_session(cfg.replace(labels=str(tmp_path / "labels.txt"), quality_labels=str(tmp_path / "quality.txt")),
                      scripts=scripts, verifier=verifier)
    q = rep.summary["quality"]
    assert q["n"] == len(scores)
    assert q["average"] == pytest.approx(sum(scores.values()) / len(scores), abs=1e-12)
    assert q["low_quality_rate"] == pytest.approx(sum(v <= 3 for v in scores.values()) / len(scores), abs=1e-12)

    turns = rep.decisions["turns"]
    assert {t["turn_id"]: t["label"] for t in turns} == labels
    bad = [t for t in turns if labels[t["turn_id"]] == "bad"]
    good = [t for t in turns if labels[t["turn_id"]] == "good"]
    assert rep.summary["bad_commit_rate"] == sum(t["outcome"] == "commit" for t in bad) / len(bad)
    assert rep.summary["good_commit_rate"] == sum(t["outcome"] == "commit" for t in good) / len(good)
