"""Self-describing checkpoint container.

A checkpoint is one canonical-JSON file holding the model config, every named
parameter tensor (shape + base64 of the little-endian float64 bytes), the
training-set normalization statistics, a format-version integer and, when
training is meant to be resumable, the optimizer/RNG snapshot.  Canonical
serialization (sorted keys, fixed separators) makes save/load/save byte-exact.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, StgcnError
from .ioutil import atomic_write_text
from .model import ModelConfig, ModelParams, NormStats

CHECKPOINT_FORMAT_VERSION = 1


def encode_array(arr) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def decode_array(text, shape) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f8").copy()
    return arr.reshape(shape)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    stats: NormStats
    trainer_state: dict | None = None


def save_checkpoint(path, config: ModelConfig, params: ModelParams, stats: NormStats,
                    trainer_state: dict | None = None):
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config.to_dict(),
        "stats": {"mean": encode_array(stats.mean), "std": encode_array(stats.std)},
        "params": [
            {"name": name, "shape": list(p.data.shape), "data": encode_array(p.data)}
            for name, p in sorted(params.items())
        ],
        "trainer_state": trainer_state,
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise StgcnError(f"unsupported checkpoint format version {version!r}")
    config = ModelConfig(**payload["config"])
    values = {}
    for entry in payload["params"]:
        values[entry["name"]] = decode_array(entry["data"], tuple(entry["shape"]))
    expected = {name for name, _, _ in ModelParams._tensor_specs(config)}
    if set(values) != expected:
        missing = sorted(expected - set(values))
        extra = sorted(set(values) - expected)
        raise DimensionMismatch(f"checkpoint parameters mismatch: missing={missing} extra={extra}")
    params = ModelParams.from_values(config, values)
    stats = NormStats(
        mean=decode_array(payload["stats"]["mean"], (3,)),
        std=decode_array(payload["stats"]["std"], (3,)),
    )
    return Checkpoint(config=config, params=params, stats=stats,
                      trainer_state=payload.get("trainer_state"))
