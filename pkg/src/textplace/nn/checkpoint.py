"""Checkpoint container.

A checkpoint is an uncompressed ``.npz`` archive (no pickles) holding:

* ``param/<name>``  float64 parameter arrays
* ``adam_m/<name>``, ``adam_v/<name>``  AdamW moments (optional)
* ``meta``  UTF-8 JSON bytes stored as a uint8 array, with keys
  ``format`` (always ``"textplace-checkpoint"``), ``version`` (int),
  ``adam`` (step and hyperparameters, or null) and a free-form ``config``.

Arrays are stored bit-exactly, so save followed by load is lossless.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .optim import AdamWState

FORMAT = "textplace-checkpoint"
VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray],
                    optimizer: AdamWState | None = None, config: dict[str, Any] | None = None) -> None:
    arrays: dict[str, np.ndarray] = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    adam = None
    if optimizer is not None:
        adam = {"step": optimizer.step, **optimizer.hyperparameters()}
        arrays.update({f"adam_m/{k}": v for k, v in optimizer.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in optimizer.v.items()})
    meta = {"format": FORMAT, "version": VERSION, "adam": adam, "config": config or {}}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], AdamWState | None, dict[str, Any]]:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(archive["meta"].tobytes().decode("utf-8"))
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path}: not a {FORMAT} file")
        if meta.get("version") != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params, m, v = {}, {}, {}
        for key in archive.files:
            section, _, name = key.partition("/")
            if section == "param":
                params[name] = archive[key]
            elif section == "adam_m":
                m[name] = archive[key]
            elif section == "adam_v":
                v[name] = archive[key]
    state = None
    if meta["adam"] is not None:
        adam = dict(meta["adam"])
        state = AdamWState(step=adam.pop("step"), m=m, v=v, **adam)
    return params, state, meta["config"]
