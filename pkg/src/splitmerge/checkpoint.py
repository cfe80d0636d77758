"""Versioned JSON checkpoint container: named parameter tensors per block,
optimizer accumulators, and run metadata."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .gnn_merge import GnnMerge
from .merge import PtrNetMerge
from .optim import make_optimizer
from .split import GraphSplit, Set2SetSplit

__all__ = ["save_checkpoint", "load_checkpoint", "restore_models", "restore_optimizers"]

FORMAT = "splitmerge-checkpoint-v1"

_ARCHS = {
    "set2set": Set2SetSplit,
    "graph": GraphSplit,
    "ptrnet": PtrNetMerge,
    "gnn": GnnMerge,
}


def save_checkpoint(path, models: dict, optimizers: dict | None = None,
                    meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = {}
    for role, model in models.items():
        if model is None:
            continue
        blocks[role] = {
            "arch": model.arch,
            "hyper": model.hyper(),
            "params": {
                name: {"shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
                for name, p in model.params.items()
            },
        }
    payload = {
        "format": FORMAT,
        "meta": meta or {},
        "blocks": blocks,
        "optim": {role: opt.state_dict() for role, opt in (optimizers or {}).items()
                  if opt is not None},
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)
    return path


def load_checkpoint(path) -> dict:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    return payload


def restore_models(payload: dict) -> dict:
    """Rebuild each block from its arch + hyper and load the saved values."""
    models = {}
    for role, block in payload["blocks"].items():
        cls = _ARCHS[block["arch"]]
        model = cls(**block["hyper"], rng=np.random.default_rng(0))
        for name, spec in block["params"].items():
            model.params[name].data = np.asarray(spec["data"], dtype=np.float64) \
                .reshape(spec["shape"])
        models[role] = model
    return models


def restore_optimizers(payload: dict, models: dict) -> dict:
    opts = {}
    for role, state in payload.get("optim", {}).items():
        if role not in models:
            continue
        opt = make_optimizer(state["kind"], models[role].params, state["base_rate"])
        opt.load_state_dict(state)
        opts[role] = opt
    return opts
