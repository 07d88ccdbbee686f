"""Model checkpoints as uncompressed ``.npz`` archives.

Layout (format version 1):

``__meta__``
    uint8 array holding UTF-8 JSON with keys ``format`` (always
    ``"lulcseg-checkpoint"``), ``version``, ``model`` (backbone/jpu configs,
    ``num_classes``, ``seed``), ``layers`` (``[name, conv spec]`` pairs in
    parameter order), ``train`` (TrainConfig or null) and ``state`` (free-form, e.g.
    ``{"epoch": 3, "step": 1152}``).
``<layer>.weight`` / ``<layer>.bias``
    float32 arrays, stored verbatim, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from .model import BackboneConfig, FastFCN, JPUConfig, TrainConfig, config_dict

FORMAT = "lulcseg-checkpoint"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, model: FastFCN, train: TrainConfig | None = None, state: dict | None = None):
    layers = model.named_layers()
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "model": config_dict(model),
        "layers": [[name, dataclasses.asdict(layer.spec)] for name, layer in layers.items()],
        "train": dataclasses.asdict(train) if train is not None else None,
        "state": state or {},
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, layer in layers.items():
        arrays[f"{name}.weight"] = layer.weight.value
        arrays[f"{name}.bias"] = layer.bias.value
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[FastFCN, dict]:
    """Rebuild the model; returns ``(model, meta)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing metadata")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('version')}")
    m = meta["model"]
    model = FastFCN(BackboneConfig(**m["backbone"]), JPUConfig(**m["jpu"]), m["num_classes"], m["seed"])
    layers = model.named_layers()
    if list(layers) != [name for name, _ in meta["layers"]]:
        raise CheckpointError(f"{path}: layer list does not match the model config")
    for name, layer in layers.items():
        for pname, param in (("weight", layer.weight), ("bias", layer.bias)):
            arr = arrays.get(f"{name}.{pname}")
            if arr is None or arr.shape != param.value.shape or arr.dtype != param.value.dtype:
                raise CheckpointError(f"{path}: bad or missing array {name}.{pname}")
            param.value[...] = arr
    if meta.get("train") is not None:
        meta["train"] = TrainConfig(**meta["train"])
    return model, meta
