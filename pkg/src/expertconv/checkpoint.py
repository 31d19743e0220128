"""Binary checkpoint container for model, rate table and rng state.

Layout, all little-endian:

    magic "CKP1" | u32 version | u64 iteration
    64-byte ascii config hash
    u32 length + canonical config JSON (utf-8)
    u32 length + rng-state JSON (utf-8)
    u32 record count, then per record:
        u8 kind (0 = parameter, 1 = expert rate)
        u16 name length + name (utf-8)
        u8 ndim + ndim x u64 dims
        float64 data, C order

Records are written in a deterministic order (parameters in registry
order, rates sorted by expert id), so identical state produces identical
bytes. Writes go to a temp file in the same directory and are renamed
into place.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .model import Network
from .rate_adapt import ExpertRates, expert_param_map

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "restore_model",
]

MAGIC = b"CKP1"
FORMAT_VERSION = 1

_KIND_PARAM = 0
_KIND_RATE = 1


@dataclass
class Checkpoint:
    """Deserialized container contents."""

    iteration: int
    config_hash: str
    config: dict
    rng_states: dict
    params: dict[str, np.ndarray]
    rates: dict[str, float]


def _pack_record(kind: int, name: str, array: np.ndarray) -> bytes:
    encoded = name.encode()
    parts = [
        struct.pack("<BH", kind, len(encoded)),
        encoded,
        struct.pack("<B", array.ndim),
        struct.pack(f"<{array.ndim}Q", *array.shape),
        np.ascontiguousarray(array, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def save_checkpoint(
    path,
    model: Network,
    rates: ExpertRates,
    iteration: int,
    rng_states: dict,
    config_hash: str,
    config: dict,
) -> None:
    if len(config_hash) != 64:
        raise ValueError(f"config hash must be 64 hex chars, got {len(config_hash)}")
    config_json = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    rng_json = json.dumps(rng_states, sort_keys=True, separators=(",", ":")).encode()
    records = [
        _pack_record(_KIND_PARAM, p.name, p.data) for p in model.parameters()
    ]
    for eid in sorted(dict(rates.items())):
        records.append(_pack_record(_KIND_RATE, eid, np.asarray(rates[eid])))
    blob = b"".join(
        [
            MAGIC,
            struct.pack("<IQ", FORMAT_VERSION, iteration),
            config_hash.encode(),
            struct.pack("<I", len(config_json)),
            config_json,
            struct.pack("<I", len(rng_json)),
            rng_json,
            struct.pack("<I", len(records)),
            *records,
        ]
    )
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"not a checkpoint container: bad magic {blob[:4]!r}")
    version, iteration = struct.unpack_from("<IQ", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 4 + struct.calcsize("<IQ")
    stored_hash = blob[offset : offset + 64].decode()
    offset += 64
    (config_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    config = json.loads(blob[offset : offset + config_len])
    offset += config_len
    (rng_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    rng_states = json.loads(blob[offset : offset + rng_len])
    offset += rng_len
    (n_records,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    params: dict[str, np.ndarray] = {}
    rates: dict[str, float] = {}
    for _ in range(n_records):
        kind, name_len = struct.unpack_from("<BH", blob, offset)
        offset += 3
        name = blob[offset : offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
        offset += 8 * ndim
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        array = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        if kind == _KIND_PARAM:
            params[name] = array.copy()
        elif kind == _KIND_RATE:
            rates[name] = float(array)
        else:
            raise ValueError(f"unknown record kind {kind}")
    if offset != len(blob):
        raise ValueError(f"trailing bytes in checkpoint: {len(blob) - offset}")
    return Checkpoint(
        iteration=iteration,
        config_hash=stored_hash,
        config=config,
        rng_states=rng_states,
        params=params,
        rates=rates,
    )


def restore_model(
    model: Network, checkpoint: Checkpoint, expected_hash: str, force: bool = False
) -> ExpertRates:
    """Load parameters and the rate table into the model, in place.

    The checkpoint must carry the expected config hash unless ``force``;
    names and shapes must match the model exactly either way.
    """
    if checkpoint.config_hash != expected_hash and not force:
        raise ValueError(
            "checkpoint config hash mismatch: "
            f"checkpoint {checkpoint.config_hash} vs current {expected_hash}"
        )
    model_names = [p.name for p in model.parameters()]
    if set(model_names) != set(checkpoint.params):
        missing = sorted(set(model_names) - set(checkpoint.params))
        extra = sorted(set(checkpoint.params) - set(model_names))
        raise ValueError(
            f"checkpoint does not fit the model: missing {missing}, extra {extra}"
        )
    for p in model.parameters():
        stored = checkpoint.params[p.name]
        if stored.shape != p.data.shape:
            raise ValueError(
                f"checkpoint parameter {p.name!r} has shape {stored.shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = stored.copy()
    expected_ids = set(expert_param_map(model))
    if set(checkpoint.rates) != expected_ids:
        raise ValueError("checkpoint rate table does not match the model's experts")
    return ExpertRates(checkpoint.rates)