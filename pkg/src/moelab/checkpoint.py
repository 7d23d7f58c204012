"""Self-describing checkpoint container.

Layout: 8-byte magic, little-endian u64 header length, UTF-8 JSON header,
then the concatenated tensor payloads. The header carries the model config,
the masking sentinel value, and one entry per tensor (name, dtype, shape,
byte offset into the payload region). Payloads are little-endian row-major.

Training math is float64; checkpoints may store float32 ("f32"). Round trips
are bit-exact at the stored precision: save -> load -> save reproduces the
file bytes, and an f64 save restores values exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict

import numpy as np

from .errors import InputError, MissingArtifactError
from .model import ModelConfig, MoEModel, _rebuild_from_params
from .tensor import MASK_SENTINEL, Tensor

MAGIC = b"MOELABCK"
VERSION = 1

_DTYPES = {"f64": "<f8", "f32": "<f4"}


def save_model(model: MoEModel, path, dtype="f64"):
    """Write the model's config and parameters to ``path``."""
    named = [(name, t.data) for name, t in model.named_parameters()]
    save_tensors(path, asdict(model.config), named, dtype=dtype)


def load_model(path) -> MoEModel:
    config_dict, arrays, _ = load_tensors(path)
    config = ModelConfig(**config_dict)
    params = {
        name: Tensor(arr.astype(np.float64), requires_grad=True)
        for name, arr in arrays.items()
    }
    return _rebuild_from_params(config, params)


def save_tensors(path, config_dict, named_arrays, dtype="f64"):
    if dtype not in _DTYPES:
        raise InputError(f"unsupported checkpoint dtype {dtype!r}, want f64 or f32")
    np_dtype = np.dtype(_DTYPES[dtype])
    entries = []
    payloads = []
    offset = 0
    for name, arr in named_arrays:
        data = np.ascontiguousarray(np.asarray(arr), dtype=np_dtype)
        raw = data.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(data.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format": "moelab-checkpoint",
        "version": VERSION,
        "mask_sentinel": MASK_SENTINEL,
        "config": config_dict,
        "tensors": entries,
    }
    # canonical JSON so identical content yields identical bytes
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in payloads:
            fh.write(raw)
    os.replace(tmp, path)


def load_tensors(path):
    """Returns (config_dict, {name: ndarray}, header_dict)."""
    if not os.path.exists(path):
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise InputError(f"not a checkpoint file: {path}")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC))
    header_start = len(MAGIC) + 8
    payload_start = header_start + header_len
    if payload_start > len(blob):
        raise InputError(f"truncated checkpoint header: {path}")
    try:
        header = json.loads(blob[header_start:payload_start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"corrupt checkpoint header in {path}: {exc}") from exc
    if header.get("version") != VERSION:
        raise InputError(
            f"checkpoint version {header.get('version')} unsupported "
            f"(expected {VERSION})"
        )
    arrays = {}
    for entry in header["tensors"]:
        np_dtype = np.dtype(_DTYPES[entry["dtype"]])
        start = payload_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise InputError(
                f"truncated checkpoint payload for tensor {entry['name']!r}: {path}"
            )
        arr = np.frombuffer(blob[start:end], dtype=np_dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return header["config"], arrays, header
