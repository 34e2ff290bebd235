"""Prefix verifier network: forward and analytic backward in numpy.

Per drafted position t with hidden state h_t (d) and scalar features s_t (3)::

    hp_t = GELU(LN_proj(W_p h_t + b_p))
    zt_t = hp_t * sigmoid(W_g s_t + b_g) + W_a s_t + b_a
    e_t  = zt_t + pos_t
    z_t  = e_t + FF(e_t),   FF(x) = W_2 GELU(W_1 LN_ff(x) + b_1) + b_2
    a    = softmax(q . z_t / sqrt(d'))            (over valid positions)
    p    = LN_pool(sum_t a_t z_t)
    c    = sigmoid(w_head . p + b_head)

Batches are padded to a common length; ``mask`` marks real positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_NEG = -1e30

PARAM_ORDER = (
    "W_p", "b_p", "ln_p_g", "ln_p_b",
    "W_g", "b_g", "W_a", "b_a",
    "pos",
    "ln_ff_g", "ln_ff_b", "W_1", "b_1", "W_2", "b_2",
    "q", "ln_pool_g", "ln_pool_b",
    "w_head", "b_head",
)


@dataclass
class VerifierModel:
    """All learned parameters plus the dimensions they were built for."""

    params: dict
    hidden_dim: int
    d_model: int = 128
    ff_width: int = 200
    max_len: int = 8
    meta: dict = field(default_factory=dict)

    @property
    def param_count(self) -> int:
        return int(sum(self.params[k].size for k in PARAM_ORDER))

    def copy(self) -> "VerifierModel":
        return VerifierModel({k: v.copy() for k, v in self.params.items()}, self.hidden_dim, self.d_model,
                             self.ff_width, self.max_len, dict(self.meta))


def init_model(hidden_dim: int, d_model: int = 128, ff_width: int = 200, max_len: int = 8, seed=0) -> VerifierModel:
    if d_model >= hidden_dim:
        raise ValueError(f"d_model ({d_model}) must be smaller than hidden_dim ({hidden_dim})")
    rng = np.random.default_rng(seed)

    def dense(out_dim, in_dim):
        return rng.normal(0.0, math.sqrt(1.0 / in_dim), (out_dim, in_dim))

    dm, f = d_model, ff_width
    params = {
        "W_p": dense(dm, hidden_dim), "b_p": np.zeros(dm),
        "ln_p_g": np.ones(dm), "ln_p_b": np.zeros(dm),
        "W_g": dense(dm, 3), "b_g": np.zeros(dm),
        "W_a": dense(dm, 3) * 0.1, "b_a": np.zeros(dm),
        "pos": rng.normal(0.0, 0.02, (max_len, dm)),
        "ln_ff_g": np.ones(dm), "ln_ff_b": np.zeros(dm),
        "W_1": dense(f, dm), "b_1": np.zeros(f),
        "W_2": dense(dm, f) * 0.1, "b_2": np.zeros(dm),
        "q": rng.normal(0.0, 0.02, dm),
        "ln_pool_g": np.ones(dm), "ln_pool_b": np.zeros(dm),
        "w_head": rng.normal(0.0, math.sqrt(1.0 / dm), dm), "b_head": np.zeros(1),
    }
    return VerifierModel(params, hidden_dim, d_model, ff_width, max_len)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


def forward_batch(model: VerifierModel, hidden, scalars, mask, return_cache: bool = False):
    """Confidence for each padded sequence in the batch.

    ``hidden`` (B, n, d), ``scalars`` (B, n, 3), ``mask`` (B, n) bool with at
    least one True per row.
    """
    P = model.params
    hidden = np.asarray(hidden, dtype=np.float64)
    scalars = np.asarray(scalars, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    B, n, d = hidden.shape
    if d != model.hidden_dim:
        raise ValueError(f"hidden dimension {d} does not match model ({model.hidden_dim})")
    if n > model.max_len:
        raise ValueError(f"prefix length {n} exceeds max_len {model.max_len}")
    if scalars.shape != (B, n, 3) or mask.shape != (B, n):
        raise ValueError("scalars must be (B, n, 3) and mask (B, n)")

    a = hidden @ P["W_p"].T + P["b_p"]
    u, ln_p = layer_norm(a, P["ln_p_g"], P["ln_p_b"])
    hp = gelu(u)
    gate = expit(scalars @ P["W_g"].T + P["b_g"])
    zt = hp * gate + scalars @ P["W_a"].T + P["b_a"]
    e = zt + P["pos"][:n]
    fin, ln_ff = layer_norm(e, P["ln_ff_g"], P["ln_ff_b"])
    f1 = fin @ P["W_1"].T + P["b_1"]
    f1g = gelu(f1)
    z = e + f1g @ P["W_2"].T + P["b_2"]
    scale = 1.0 / math.sqrt(model.d_model)
    scores = np.where(mask, z @ P["q"] * scale, _NEG)
    scores = scores - scores.max(axis=1, keepdims=True)
    w = np.exp(scores) * mask
    w = w / w.sum(axis=1, keepdims=True)
    o = np.einsum("bn,bnd->bd", w, z)
    p, ln_pool = layer_norm(o, P["ln_pool_g"], P["ln_pool_b"])
    logit = p @ P["w_head"] + P["b_head"][0]
    c = expit(logit)
    if not return_cache:
        return c
    cache = dict(hidden=hidden, scalars=scalars, mask=mask, a=a, u=u, ln_p=ln_p, hp=hp, gate=gate, zt=zt,
                 e=e, fin=fin, ln_ff=ln_ff, f1=f1, f1g=f1g, z=z, w=w, o=o, p=p, ln_pool=ln_pool,
                 logit=logit, c=c, scale=scale)
    return c, cache


def backward_batch(model: VerifierModel, cache: dict, dlogit) -> dict:
    """Gradients of sum_b dlogit[b] * logit[b] with respect to every parameter."""
    P = model.params
    dlogit = np.asarray(dlogit, dtype=np.float64)
    n = cache["z"].shape[1]
    g = {}
    g["w_head"] = cache["p"].T @ dlogit
    g["b_head"] = np.array([dlogit.sum()])
    dp = dlogit[:, None] * P["w_head"]
    do, g["ln_pool_g"], g["ln_pool_b"] = _layer_norm_back(dp, P["ln_pool_g"], cache["ln_pool"])

    z, w, scale = cache["z"], cache["w"], cache["scale"]
    dz = w[:, :, None] * do[:, None, :]
    dw = np.einsum("bd,bnd->bn", do, z)
    dscores = w * (dw - (w * dw).sum(axis=1, keepdims=True))
    dz += dscores[:, :, None] * P["q"] * scale
    g["q"] = np.einsum("bn,bnd->d", dscores, z) * scale

    de = dz.copy()
    df2 = dz
    g["W_2"] = np.einsum("bnd,bnf->df", df2, cache["f1g"])
    g["b_2"] = df2.sum(axis=(0, 1))
    df1 = (df2 @ P["W_2"]) * _gelu_grad(cache["f1"])
    g["W_1"] = np.einsum("bnf,bnd->fd", df1, cache["fin"])
    g["b_1"] = df1.sum(axis=(0, 1))
    dfin = df1 @ P["W_1"]
    dx, g["ln_ff_g"], g["ln_ff_b"] = _layer_norm_back(dfin, P["ln_ff_g"], cache["ln_ff"])
    de += dx

    g["pos"] = np.zeros_like(P["pos"])
    g["pos"][:n] = de.sum(axis=0)
    dzt = de
    s = cache["scalars"]
    g["W_a"] = np.einsum("bnd,bnk->dk", dzt, s)
    g["b_a"] = dzt.sum(axis=(0, 1))
    gate = cache["gate"]
    dgl = dzt * cache["hp"] * gate * (1.0 - gate)
    g["W_g"] = np.einsum("bnd,bnk->dk", dgl, s)
    g["b_g"] = dgl.sum(axis=(0, 1))
    du = dzt * gate * _gelu_grad(cache["u"])
    da, g["ln_p_g"], g["ln_p_b"] = _layer_norm_back(du, P["ln_p_g"], cache["ln_p"])
    g["W_p"] = np.einsum("bnd,bnh->dh", da, cache["hidden"])
    g["b_p"] = da.sum(axis=(0, 1))
    return g


def pad_prefixes(prefixes, max_len=None):
    """Stack variable-length prefixes into (hidden, scalars, mask) arrays."""
    if not prefixes:
        raise ValueError("no prefixes given")
    n = max(len(p) for p in prefixes)
    if max_len is not None and n > max_len:
        raise ValueError(f"prefix length {n} exceeds max_len {max_len}")
    d = prefixes[0].hidden_dim
    B = len(prefixes)
    hidden = np.zeros((B, n, d))
    scalars = np.zeros((B, n, 3))
    mask = np.zeros((B, n), dtype=bool)
    for i, pre in enumerate(prefixes):
        if pre.hidden_dim != d:
            raise ValueError(f"prefix {i} has hidden dimension {pre.hidden_dim}, expected {d}")
        k = len(pre)
        hidden[i, :k] = pre.hidden_states
        scalars[i, :k] = pre.scalar_features
        mask[i, :k] = True
    return hidden, scalars, mask


def forward(model: VerifierModel, prefix) -> float:
    """Confidence that a single drafted prefix is safe to commit."""
    hidden, scalars, mask = pad_prefixes([prefix], model.max_len)
    return float(forward_batch(model, hidden, scalars, mask)[0])


def attention_weights(model: VerifierModel, prefix) -> np.ndarray:
    hidden, scalars, mask = pad_prefixes([prefix], model.max_len)
    _, cache = forward_batch(model, hidden, scalars, mask, return_cache=True)
    return cache["w"][0]


def pooled_representation(model: VerifierModel, prefix) -> np.ndarray:
    hidden, scalars, mask = pad_prefixes([prefix], model.max_len)
    _, cache = forward_batch(model, hidden, scalars, mask, return_cache=True)
    return cache["p"][0]
