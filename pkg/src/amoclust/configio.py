"""Checkpoint files and run-config parsing.

A checkpoint is a single binary file: the magic string ``TCPF1``, a
little-endian uint64 giving the manifest length, a JSON manifest, then every
parameter tensor as little-endian float32 in manifest order. Weights are cast
to 32 bits on save regardless of the training dtype (which the manifest
records); loading always restores float64, so ``load(save(m))`` equals the
original after one float32 round and is bitwise stable from then on.

Run configs are plain JSON validated against a strict schema before any field
is touched: unknown keys are rejected at every level and violations are
reported together with their JSON paths. The shipped presets live next to
this module under ``presets/``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Tuple

import jsonschema
import numpy as np

from .cin import init_cin_params
from .pin import DECODERS, PinHyper, init_pin_params
from .priors import PriorRanges
from .training import (CIN_LOSS_KINDS, COUPLINGS, PIN_LOSS_KINDS, ModelParams,
                       TrainConfig)

MAGIC = b"TCPF1"
FORMAT_VERSION = 1
_LEN_HEADER = struct.Struct("<Q")


class ConfigError(ValueError):
    """Raised when a run-config document fails schema validation."""


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: ModelParams, *, seed: int, step: int,
                    pin_loss_kind: str, cin_loss_kind: str,
                    ranges: dict = None) -> None:
    """`ranges`, when given, records the task-size envelope the model was
    trained on so the cluster command can warn about out-of-envelope input."""
    named = list(model.named_tensors())
    entries = []
    chunks = []
    offset = 0
    for name, t in named:
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.data.shape),
                        "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "hyper": asdict(model.hyper),
        "seed": seed,
        "step": step,
        "pin_loss_kind": pin_loss_kind,
        "cin_loss_kind": cin_loss_kind,
        "training_dtype": str(named[0][1].data.dtype),
        "tensors": entries,
    }
    if ranges is not None:
        manifest["ranges"] = ranges
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN_HEADER.pack(len(payload)))
        fh.write(payload)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> Tuple[ModelParams, dict]:
    """Read a checkpoint back into a float64 model.

    Returns the rebuilt parameters and the manifest. Refuses files whose
    magic or format version does not match."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + _LEN_HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint")
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a {MAGIC.decode()} checkpoint")
    (mlen,) = _LEN_HEADER.unpack_from(raw, len(MAGIC))
    body = len(MAGIC) + _LEN_HEADER.size
    if len(raw) < body + mlen:
        raise ValueError(f"{path}: truncated checkpoint manifest")
    try:
        manifest = json.loads(raw[body:body + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint manifest") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: checkpoint format version {version!r} "
                         f"not supported (expected {FORMAT_VERSION})")

    blob = raw[body + mlen:]
    entries = manifest["tensors"]
    total = sum(math.prod(e["shape"]) for e in entries)
    if total * 4 != len(blob):
        raise ValueError(f"{path}: weight blob holds {len(blob)} bytes, "
                         f"manifest declares {total * 4}")

    hyper = PinHyper(**manifest["hyper"])
    rng = np.random.default_rng(0)
    model = ModelParams(
        pin=init_pin_params(hyper, rng),
        cin=init_cin_params(hyper.k_max, rng,
                            with_ordinal=manifest["cin_loss_kind"] == "ordinal"),
        hyper=hyper)
    named = dict(model.named_tensors())
    loaded = set()
    for e in entries:
        name, shape = e["name"], tuple(e["shape"])
        if name not in named:
            raise ValueError(f"{path}: unknown tensor {name!r} in manifest")
        if named[name].data.shape != shape:
            raise ValueError(f"{path}: tensor {name!r} has shape {shape}, "
                             f"model expects {named[name].data.shape}")
        count = math.prod(shape)
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
        named[name].data = flat.reshape(shape).astype(np.float64)
        loaded.add(name)
    missing = sorted(set(named) - loaded)
    if missing:
        raise ValueError(f"{path}: manifest is missing tensors {missing}")
    return model, manifest


# ---------------------------------------------------------------------------
# run configs
# ---------------------------------------------------------------------------

_RANGES_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n_min": {"type": "integer", "minimum": 2},
        "n_max": {"type": "integer", "minimum": 2},
        "d_min": {"type": "integer", "minimum": 2},
        "d_max": {"type": "integer", "minimum": 2},
        "k_max": {"type": "integer", "minimum": 2},
    },
}

_HYPER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "d": {"type": "integer", "minimum": 1},
        "d_tok": {"type": "integer", "minimum": 1},
        "l_enc": {"type": "integer", "minimum": 0},
        "l_dec": {"type": "integer", "minimum": 1},
        "heads": {"type": "integer", "minimum": 1},
        "k_max": {"type": "integer", "minimum": 2},
        "ffn_mult": {"type": "integer", "minimum": 1},
        "temperature_init": {"type": "number", "exclusiveMinimum": 0},
        "decoder": {"enum": list(DECODERS)},
    },
}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "steps": {"type": "integer", "minimum": 1},
        "batch_tasks": {"type": "integer", "minimum": 1},
        "warmup_steps": {"type": "integer", "minimum": 0},
        "peak_lr": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "ranges": _RANGES_SCHEMA,
        "hyper": _HYPER_SCHEMA,
        "pin_loss_kind": {"enum": list(PIN_LOSS_KINDS)},
        "cin_loss_kind": {"enum": list(CIN_LOSS_KINDS)},
        "coupling": {"enum": list(COUPLINGS)},
        "gmm_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "p_k_two": {"type": "number", "minimum": 0, "maximum": 1},
        "omega_target_range": {
            "oneOf": [
                {"type": "null"},
                {"type": "array", "minItems": 2, "maxItems": 2,
                 "items": {"type": "number", "exclusiveMinimum": 0,
                           "exclusiveMaximum": 1}},
            ],
        },
        "mc_samples": {"type": "integer", "minimum": 1000},
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(RUN_CONFIG_SCHEMA)


def parse_run_config(doc: dict) -> TrainConfig:
    """Validate a JSON document and build the training configuration.

    Schema violations (wrong types, unknown keys, out-of-range values) are
    collected and raised together as one ConfigError; cross-field rules are
    then enforced by TrainConfig itself."""
    errors = sorted(_VALIDATOR.iter_errors(doc), key=lambda e: e.json_path)
    if errors:
        lines = [f"{e.json_path}: {e.message}" for e in errors]
        raise ConfigError("invalid run config: " + "; ".join(lines))
    kwargs = dict(doc)
    if "ranges" in kwargs:
        kwargs["ranges"] = PriorRanges(**kwargs["ranges"])
    if "hyper" in kwargs:
        kwargs["hyper"] = PinHyper(**kwargs["hyper"])
    if kwargs.get("omega_target_range") is not None and "omega_target_range" in kwargs:
        kwargs["omega_target_range"] = tuple(kwargs["omega_target_range"])
    return TrainConfig(**kwargs)


def load_run_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    return parse_run_config(doc)


def preset_path(name: str) -> Path:
    p = Path(__file__).parent / "presets" / f"{name}.json"
    if not p.exists():
        available = sorted(q.stem for q in p.parent.glob("*.json"))
        raise ConfigError(f"unknown preset {name!r}, available: {available}")
    return p
