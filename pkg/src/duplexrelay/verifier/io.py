"""Weights container and labeled-dataset files."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..fast_path import DraftPrefix
from .kfold import LabeledPrefix
from .network import PARAM_ORDER, VerifierModel

FORMAT_VERSION = 1


def save_model(model: VerifierModel, path) -> None:
    """Write named tensors to an ``.npz`` with a JSON header and parameter-count footer."""
    header = dict(
        format="duplexrelay-verifier",
        version=FORMAT_VERSION,
        hidden_dim=model.hidden_dim,
        d_model=model.d_model,
        ff_width=model.ff_width,
        max_len=model.max_len,
        tensors={k: list(model.params[k].shape) for k in PARAM_ORDER},
        meta=model.meta,
    )
    footer = dict(param_count=model.param_count)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            __header__=np.array(json.dumps(header, sort_keys=True)),
            __footer__=np.array(json.dumps(footer)),
            **{k: model.params[k] for k in PARAM_ORDER},
        )


def load_model(path) -> VerifierModel:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        footer = json.loads(str(data["__footer__"]))
        if header.get("format") != "duplexrelay-verifier":
            raise ValueError(f"{path} is not a verifier weights file")
        if header["version"] > FORMAT_VERSION:
            raise ValueError(f"unsupported weights version {header['version']}")
        params = {k: np.array(data[k], dtype=np.float64) for k in PARAM_ORDER}
    for k, shape in header["tensors"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"tensor {k} has shape {params[k].shape}, header says {shape}")
    model = VerifierModel(params, header["hidden_dim"], header["d_model"], header["ff_width"], header["max_len"],
                          header.get("meta", {}))
    if model.param_count != footer["param_count"]:
        raise ValueError("parameter count footer does not match tensors")
    return model


def write_dataset(examples, path) -> None:
    """One JSON record per example with fold, label, n and flattened features."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            p = ex.prefix
            rec = dict(
                turn_id=ex.turn_id,
                script_id=ex.script_id,
                fold=ex.fold,
                generator_fold=ex.generator_fold,
                label="good" if ex.label else "bad",
                n=len(p),
                d=p.hidden_dim,
                words=list(p.words),
                draft_ms=p.draft_duration_ms,
                hidden=p.hidden_states.ravel().tolist(),
                scalars=p.scalar_features.ravel().tolist(),
            )
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path) -> list[LabeledPrefix]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        n, d = rec["n"], rec["d"]
        prefix = DraftPrefix(
            tuple(rec["words"]),
            np.array(rec["hidden"]).reshape(n, d),
            np.array(rec["scalars"]).reshape(n, 3),
            rec["draft_ms"],
        )
        out.append(
            LabeledPrefix(prefix, 1 if rec["label"] == "good" else 0, rec["fold"], rec["script_id"], rec["turn_id"],
                          rec["generator_fold"])
        )
    return out
