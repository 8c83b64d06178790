"""Versioned checkpoint container: model config, weights by canonical name,
token index metadata, and the per-speaker parameter map.

Arrays are stored as raw .npy entries inside an uncompressed zip (numpy's
savez), which round-trips float64 bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Union

import numpy as np

from .autodiff import Tensor
from .errors import DataError
from .model import BLANK_ID, EOS_ID, SOS_ID, ConformerModel, ModelConfig, \
    SpeakerParams
from .objectives import VariationalPosterior

FORMAT_VERSION = 1
SpeakerState = Union[SpeakerParams, VariationalPosterior]


def save_checkpoint(path, model: ConformerModel,
                    speakers: dict[str, SpeakerState] | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    meta = {
        "format_version": FORMAT_VERSION,
        "blank_id": BLANK_ID,
        "sos_id": SOS_ID,
        "eos_id": EOS_ID,
        "config": dataclasses.asdict(model.config),
    }
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    for name, tensor in model.params.items():
        arrays[f"param/{name}"] = tensor.data
    for speaker_id, state in (speakers or {}).items():
        if isinstance(state, VariationalPosterior):
            arrays[f"speaker/{speaker_id}/mu"] = state.mu
            arrays[f"speaker/{speaker_id}/log_sigma"] = state.log_sigma
        else:
            arrays[f"speaker/{speaker_id}/r"] = state.r
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns (model, {speaker_id: SpeakerParams | VariationalPosterior})."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        if "__meta__" not in data:
            raise DataError(f"not a checkpoint file: {path}")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {meta.get('format_version')}")
        cfg_dict = meta["config"]
        cfg_dict["subsample_strides"] = tuple(cfg_dict["subsample_strides"])
        config = ModelConfig(**cfg_dict)
        params = {}
        speaker_raw: dict[str, dict[str, np.ndarray]] = {}
        for key in data.files:
            if key.startswith("param/"):
                params[key[len("param/"):]] = Tensor(data[key].copy(),
                                                     requires_grad=True)
            elif key.startswith("speaker/"):
                _, speaker_id, part = key.split("/", 2)
                speaker_raw.setdefault(speaker_id, {})[part] = data[key].copy()
    model = ConformerModel(config, params=params)
    expected = set(ConformerModel(config, seed=0).params)
    if set(params) != expected:
        raise DataError("checkpoint parameter names do not match the config")
    speakers: dict[str, SpeakerState] = {}
    for speaker_id, parts in speaker_raw.items():
        if "mu" in parts:
            speakers[speaker_id] = VariationalPosterior(parts["mu"],
                                                        parts["log_sigma"])
        else:
            speakers[speaker_id] = SpeakerParams(speaker_id, parts["r"])
    return model, speakers
