import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from duplexrelay.fast_path import DraftContext, DraftPrefix, StochasticSource
from duplexrelay.verifier import (
    BAD,
    GOOD,
    MARGIN_CAP,
    DegenerateInputError,
    FileLabelOracle,
    FocalLossConfig,
    LabeledPrefix,
    PrefixVerifier,
    RuleOracle,
    TrainingError,
    commit_mask,
    compute_scalar_features,
    decide,
    focal_loss,
    forward,
    init_model,
    load_model,
    operating_points,
    ranking_metrics,
    read_dataset,
    save_model,
    write_dataset,
)
from duplexrelay.verifier.network import forward_batch, pad_prefixes


# -- scalar features -------------------------------------------------------------


def test_features_by_hand():
    f = compute_scalar_features([0.5, 0.25, 0.25], 0)
    assert f.entropy == pytest.approx(1.5 * math.log(2))
    assert f.log_prob == pytest.approx(math.log(0.5))
    assert f.margin == pytest.approx(math.log(2))
    assert not f.flagged


def test_features_uniform_and_one_hot():
    u = compute_scalar_features([0.25] * 4, 2)
    assert u.entropy == pytest.approx(math.log(4)) and u.margin == 0.0
    hot = compute_scalar_features([1.0, 0.0, 0.0], 0)
    assert hot.entropy == 0.0 and hot.log_prob == 0.0 and hot.margin == MARGIN_CAP


def test_features_non_argmax_selection_is_flagged():
    f = compute_scalar_features([0.6, 0.3, 0.1], 1)
    assert f.flagged and f.margin == pytest.approx(math.log(0.3 / 0.6))


def test_features_errors():
    with pytest.raises(ValueError):
        compute_scalar_features([0.5, 0.6], 0)
    with pytest.raises(ValueError):
        compute_scalar_features([1.0], 0)
    with pytest.raises(DegenerateInputError):
        compute_scalar_features([1.0, 0.0], 1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=12))
def test_feature_ranges(weights):
    p = np.array(weights) / sum(weights)
    f = compute_scalar_features(p, int(np.argmax(p)))
    assert 0 <= f.entropy <= math.log(len(p)) + 1e-12
    assert f.log_prob <= 0
    assert 0 <= f.margin <= MARGIN_CAP


# -- focal loss ------------------------------------------------------------------


def test_focal_loss_by_hand():
    loss, _ = focal_loss(0.9, GOOD)
    assert loss == pytest.approx(-0.25 * 0.01 * math.log(0.9))
    loss, _ = focal_loss(0.9, "bad")
    assert loss == pytest.approx(-0.75 * 0.81 * math.log(0.1))


def test_focal_gradient_matches_finite_difference():
    cfg = FocalLossConfig(0.3, 0.7, 1.5)
    for c, y in itertools.product([0.05, 0.4, 0.93], [GOOD, BAD]):
        _, g = focal_loss(c, y, cfg)
        h = 1e-6
        num = (focal_loss(c + h, y, cfg)[0] - focal_loss(c - h, y, cfg)[0]) / (2 * h)
        assert g == pytest.approx(num, rel=1e-6)


def test_focal_clamps_extremes():
    loss, grad = focal_loss(np.array([0.0, 1.0]), np.array([GOOD, BAD]))
    assert np.all(np.isfinite(loss)) and np.all(np.isfinite(grad))


def test_focal_config_validation():
    with pytest.raises(ValueError):
        FocalLossConfig(gamma=-1)
    with pytest.raises(ValueError):
        FocalLossConfig(alpha_good=0)
    with pytest.raises(ValueError):
        focal_loss(0.5, "maybe")


# -- network ---------------------------------------------------------------------


def _prefix(rng, n, d):
    feats = np.column_stack([rng.uniform(0, 2, n), -rng.uniform(0, 3, n), rng.uniform(0, 4, n)])
    return DraftPrefix(tuple(f"w{i}" for i in range(n)), rng.normal(0, 1, (n, d)), feats, 14.2 * n)


def _ln(x, g, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * gi + bi for v, gi, bi in zip(x, g, b)]


def _gelu(x):
    return 0.5 * x * (1 + math.erf(x / math.sqrt(2)))


def _sig(x):
    return 1 / (1 + math.exp(-x))


def naive_forward(model, prefix):
    """Position-by-position reimplementation with Python scalars."""
    P = {k: v.tolist() for k, v in model.params.items()}
    dm = model.d_model
    zs = []
    for t in range(len(prefix)):
        h = prefix.hidden_states[t].tolist()
        s = prefix.scalar_features[t].tolist()
        a = [sum(w * x for w, x in zip(row, h)) + b for row, b in zip(P["W_p"], P["b_p"])]
        hp = [_gelu(v) for v in _ln(a, P["ln_p_g"], P["ln_p_b"])]
        gate = [_sig(sum(w * x for w, x in zip(row, s)) + b) for row, b in zip(P["W_g"], P["b_g"])]
        aff = [sum(w * x for w, x in zip(row, s)) + b for row, b in zip(P["W_a"], P["b_a"])]
        e = [hp[i] * gate[i] + aff[i] + P["pos"][t][i] for i in range(dm)]
        fin = _ln(e, P["ln_ff_g"], P["ln_ff_b"])
        f1 = [_gelu(sum(w * x for w, x in zip(row, fin)) + b) for row, b in zip(P["W_1"], P["b_1"])]
        f2 = [sum(w * x for w, x in zip(row, f1)) + b for row, b in zip(P["W_2"], P["b_2"])]
        zs.append([e[i] + f2[i] for i in range(dm)])
    scores = [sum(q * z for q, z in zip(P["q"], zt)) / math.sqrt(dm) for zt in zs]
    m = max(scores)
    ws = [math.exp(x - m) for x in scores]
    ws = [w / sum(ws) for w in ws]
    o = [sum(w * zt[i] for w, zt in zip(ws, zs)) for i in range(dm)]
    p = _ln(o, P["ln_pool_g"], P["ln_pool_b"])
    return _sig(sum(w * x for w, x in zip(P["w_head"], p)) + P["b_head"][0])


@pytest.mark.parametrize("n", [1, 3, 5])
def test_forward_matches_naive_loop(n):
    rng = np.random.default_rng(n)
    model = init_model(24, 8, 12, 6, seed=n)
    for k in model.params:  # move away from the symmetric initialisation
        model.params[k] = model.params[k] + rng.normal(0, 0.1, model.params[k].shape)
    prefix = _prefix(rng, n, 24)
    assert forward(model, prefix) == pytest.approx(naive_forward(model, prefix), abs=1e-12)


def test_padding_does_not_change_scores():
    rng = np.random.default_rng(0)
    model = init_model(16, 8, 10, 8, seed=1)
    short, long = _prefix(rng, 2, 16), _prefix(rng, 6, 16)
    batch = forward_batch(model, *pad_prefixes([short, long]))
    assert batch[0] == pytest.approx(forward(model, short), abs=1e-14)
    assert batch[1] == pytest.approx(forward(model, long), abs=1e-14)


def test_default_size_is_about_170k_parameters():
    model = init_model(896)
    assert model.param_count == 169_417


def test_dimension_errors():
    model = init_model(16, 8, 10, 4)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        forward(model, _prefix(rng, 5, 16))
    with pytest.raises(ValueError):
        forward(model, _prefix(rng, 2, 12))
    with pytest.raises(ValueError):
        init_model(8, 8)


# -- estimator -------------------------------------------------------------------


def _dataset(n=400, seed=0, bad_rate=0.2, separation=1.0, d=64):
    src = StochasticSource(hidden_dim=d, bad_rate=bad_rate, separation=separation, seed=seed)
    out = []
    for i in range(n):
        ctx = DraftContext(f"s{i}", 0, reference_words=("Sure,", "I", "can", "do", "that"))
        p = src.draft(ctx, 5)
        out.append(LabeledPrefix(p, RuleOracle().label(ctx, p), 0, ctx.script_id, ctx.turn_id, 0))
    return out


def test_estimator_follows_sklearn_conventions():
    est = PrefixVerifier(d_model=16, ff_width=20, epochs=3)
    assert clone(est).get_params() == est.get_params()
    est.set_params(epochs=4)
    assert est.epochs == 4
    with pytest.raises(Exception):
        est.predict_proba(_dataset(4))


def test_fit_predict_proba_and_predict():
    data = _dataset(200)
    est = PrefixVerifier(d_model=16, ff_width=20, epochs=8).fit(data)
    proba = est.predict_proba(data)
    assert proba.shape == (200, 2)
    assert np.allclose(proba.sum(axis=1), 1.0)
    assert list(est.classes_) == [BAD, GOOD]
    pred = est.predict(data)
    labels = np.array([ex.label for ex in data])
    assert (pred == labels).mean() > 0.9
    assert est.loss_curve_[-1] < est.loss_curve_[0]


def test_fit_is_deterministic():
    data = _dataset(100)
    a = PrefixVerifier(d_model=16, ff_width=20, epochs=3, random_state=5).fit(data).confidence(data)
    b = PrefixVerifier(d_model=16, ff_width=20, epochs=3, random_state=5).fit(data).confidence(data)
    assert np.array_equal(a, b)


def test_single_class_training_fails():
    data = [ex for ex in _dataset(60) if ex.label == GOOD]
    with pytest.raises(TrainingError):
        PrefixVerifier(d_model=16, ff_width=20, epochs=1).fit(data)


def test_threshold_validation():
    est = PrefixVerifier(d_model=16, ff_width=20, epochs=1, threshold=1.5).fit(_dataset(40, bad_rate=0.5))
    with pytest.raises(ValueError):
        est.predict(_dataset(2))
    with pytest.raises(TypeError):
        decide(est.model_, _dataset(1)[0].prefix, "0.5")


def test_commit_rule_edges():
    assert list(commit_mask([0.0, 0.5, 1.0], 0.0)) == [True, True, True]
    assert list(commit_mask([0.0, 0.5, 1.0], 0.5)) == [False, True, True]
    assert list(commit_mask([0.0, 0.5, 1.0], 1.0)) == [False, False, False]


def test_weights_round_trip(tmp_path):
    est = PrefixVerifier(d_model=16, ff_width=20, epochs=2).fit(_dataset(60, bad_rate=0.5))
    save_model(est.model_, tmp_path / "w.npz")
    back = load_model(tmp_path / "w.npz")
    data = _dataset(10)
    assert np.array_equal(PrefixVerifier.from_model(back).confidence(data), est.confidence(data))
    assert back.param_count == est.model_.param_count


def test_dataset_round_trip(tmp_path):
    data = _dataset(5)
    write_dataset(data, tmp_path / "d.jsonl")
    back = read_dataset(tmp_path / "d.jsonl")
    assert [b.label for b in back] == [a.label for a in data]
    assert np.array_equal(back[3].prefix.hidden_states, data[3].prefix.hidden_states)


def brute_auroc(conf, labels):
    bad = [1 - c for c, y in zip(conf, labels) if y == BAD]
    good = [1 - c for c, y in zip(conf, labels) if y == GOOD]
    wins = sum(1.0 if b > g else 0.5 if b == g else 0.0 for b in bad for g in good)
    return wins / (len(bad) * len(good))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]), st.sampled_from([GOOD, BAD])), min_size=2, max_size=25))
def test_auroc_matches_pair_counting(pairs):
    conf, labels = zip(*pairs)
    if len(set(labels)) < 2:
        return
    auroc, _ = ranking_metrics(conf, labels)
    assert auroc == pytest.approx(brute_auroc(conf, labels), abs=1e-12)


def test_operating_points_by_hand():
    conf = [0.1, 0.6, 0.8, 0.3, 0.9]
    labels = [BAD, BAD, GOOD, GOOD, GOOD]
    row = operating_points(conf, labels, [0.5])[0]
    assert row["bad_commit"] == 0.5
    assert row["good_commit"] == pytest.approx(2 / 3)
    assert row["fallback"] == pytest.approx(2 / 5)


def test_file_label_oracle(tmp_path):
    path = tmp_path / "labels.txt"
    path.write_text("# turn | [prefix_len |] label\ns:0 | good\ns:1 | 3 | bad\ns:1 | 5 | good\n")
    oracle = FileLabelOracle.from_file(path)
    p3 = _dataset(1)[0].prefix
    assert oracle.label(DraftContext("s", 0), p3) == GOOD
    assert oracle.label(DraftContext("s", 1), p3) == GOOD  # five-word prefix
    with pytest.raises(KeyError):
        oracle.label(DraftContext("s", 9), p3)


def _positional_free(model):
    model.params["pos"][:] = 0.0
    model.params["W_2"][:] = 0.0
    model.params["b_2"][:] = 0.0
    return model


def test_positions_break_permutation_invariance():
    rng = np.random.default_rng(3)
    model = init_model(16, 8, 10, 6, seed=2)
    model.params["pos"] = rng.normal(0, 1, model.params["pos"].shape)
    p = _prefix(rng, 4, 16)
    perm = [2, 0, 3, 1]
    q = DraftPrefix(tuple(p.words[i] for i in perm), p.hidden_states[perm], p.scalar_features[perm], p.draft_duration_ms)
    assert abs(forward(model, p) - forward(model, q)) > 1e-6
    flat = _positional_free(model.copy())
    assert forward(flat, p) == pytest.approx(forward(flat, q), abs=1e-12)


def test_each_input_path_reaches_the_output():
    rng = np.random.default_rng(4)
    model = init_model(16, 8, 10, 6, seed=5)
    for k in model.params:
        model.params[k] = model.params[k] + rng.normal(0, 0.3, model.params[k].shape)
    p = _prefix(rng, 3, 16)
    no_hidden = DraftPrefix(p.words, np.zeros_like(p.hidden_states), p.scalar_features, 1.0)
    other_scalars = DraftPrefix(p.words, no_hidden.hidden_states, p.scalar_features * 2.0, 1.0)
    assert abs(forward(model, no_hidden) - forward(model, other_scalars)) > 1e-6
    no_scalars = DraftPrefix(p.words, p.hidden_states, np.zeros_like(p.scalar_features), 1.0)
    other_hidden = DraftPrefix(p.words, p.hidden_states + 1.0, no_scalars.scalar_features, 1.0)
    assert abs(forward(model, no_scalars) - forward(model, other_hidden)) > 1e-6


def test_commit_set_shrinks_with_threshold():
    conf = np.random.default_rng(0).uniform(0, 1, 500)
    masks = [commit_mask(conf, t) for t in np.linspace(0, 1, 21)]
    for a, b in zip(masks, masks[1:]):
        assert np.all(b <= a)
