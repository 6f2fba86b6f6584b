"""Versioned text checkpoints for encoder states.

JSON documents mapping parameter names to shape + flat arrays of C99
hex-floats, so the round trip is bit-exact at double precision.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import DataError
from .nn import Encoder, EncoderSpec, EncoderState

FORMAT = "imix-checkpoint"
VERSION = 1


def _encode_arrays(arrays: dict) -> dict:
    return {
        name: {"shape": list(a.shape), "hex": [v.hex() for v in a.ravel().tolist()]}
        for name, a in arrays.items()
    }


def _decode_into(arrays: dict, encoded: dict, what: str):
    for name, a in arrays.items():
        if name not in encoded:
            raise DataError(f"checkpoint missing {what} entry {name!r}")
        entry = encoded[name]
        if tuple(entry["shape"]) != a.shape:
            raise DataError(
                f"checkpoint {what} {name!r} has shape {entry['shape']}, "
                f"expected {list(a.shape)}"
            )
        flat = np.array([float.fromhex(h) for h in entry["hex"]])
        a[...] = flat.reshape(a.shape)


def save_checkpoint(path: str, state: EncoderState, meta: dict | None = None):
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "spec": state.encoder.spec.to_dict(),
        "params": _encode_arrays(state.encoder.named_params()),
        "stats": _encode_arrays(state.encoder.named_stats()),
        "ema": None,
        "meta": meta or {},
    }
    if state.ema is not None:
        doc["ema"] = {
            "params": _encode_arrays(state.ema.named_params()),
            "stats": _encode_arrays(state.ema.named_stats()),
        }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path: str) -> EncoderState:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path!r}: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise DataError(f"{path!r} is not an imix checkpoint")
    if doc.get("version") != VERSION:
        raise DataError(f"unsupported checkpoint version {doc.get('version')}")
    spec = EncoderSpec.from_dict(doc["spec"])
    encoder = Encoder(spec, rng=None)
    _decode_into(encoder.named_params(), doc["params"], "parameter")
    _decode_into(encoder.named_stats(), doc["stats"], "stat")
    buffers = {k: np.zeros_like(v) for k, v in encoder.named_params().items()}
    state = EncoderState(encoder, buffers)
    if doc.get("ema"):
        state.ema = encoder.clone()
        _decode_into(state.ema.named_params(), doc["ema"]["params"], "EMA parameter")
        _decode_into(state.ema.named_stats(), doc["ema"]["stats"], "EMA stat")
    return state
