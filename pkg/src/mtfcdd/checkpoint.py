"""Checkpoint persistence with a bit-exact binary array format.

File layout:

    bytes 0..7    magic  b"MTFCDD\\x01\\x00" (format version in byte 6)
    bytes 8..15   header length L, uint64 little-endian
    bytes 16..    L bytes of UTF-8 JSON header
    then          raw little-endian array payload, concatenated

The JSON header holds arbitrary metadata (run config, epoch counters,
metric history) plus an ``arrays`` table of name/dtype/shape/offset/nbytes
entries describing the payload. Arrays round-trip bit-for-bit: saving and
loading reproduces every parameter, batch-norm buffer and optimizer moment
exactly, so a restored model's forward pass matches the pre-save model to
the last bit.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import DataError

MAGIC = b"MTFCDD\x01\x00"


def save_checkpoint(path, header: dict, arrays: dict):
    """Write header metadata and named arrays; atomic via rename."""
    table = []
    payloads = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        table.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    meta = dict(header)
    meta["arrays"] = table
    blob = json.dumps(meta).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (header dict, {name: array})."""
    if not os.path.isfile(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise DataError(f"not a checkpoint file (bad magic): {path}")
    header_len = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    start = 16 + header_len
    if len(blob) < start:
        raise DataError(f"truncated checkpoint header: {path}")
    try:
        meta = json.loads(blob[16:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header: {path}: {exc}") from exc
    arrays = {}
    for entry in meta.pop("arrays", []):
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(blob):
            raise DataError(f"truncated checkpoint payload: {path}")
        arr = np.frombuffer(blob[lo:hi], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return meta, arrays


# ---------------------------------------------------------------------------
# model <-> array-dict adapters
# ---------------------------------------------------------------------------


def model_state_arrays(model, optimizer=True) -> dict:
    """Collect parameters, batch-norm buffers and Adam state by name."""
    out = {}
    for name, p in model.named_parameters().items():
        out[f"param/{name}"] = p.data
        if optimizer and p.adam_m is not None:
            out[f"adam_m/{name}"] = p.adam_m
            out[f"adam_v/{name}"] = p.adam_v
            out[f"adam_t/{name}"] = np.array([p.adam_t], dtype=np.int64)
    for name, state in model.bn_states().items():
        out[f"bn/{name}/mean"] = state.running_mean
        out[f"bn/{name}/var"] = state.running_var
        out[f"bn/{name}/updates"] = np.array([state.num_updates], dtype=np.int64)
    return out


def restore_model_state(model, arrays: dict, optimizer=True):
    """Load arrays produced by model_state_arrays back into the model."""
    for name, p in model.named_parameters().items():
        key = f"param/{name}"
        if key not in arrays:
            raise DataError(f"checkpoint is missing parameter {name!r}")
        if tuple(arrays[key].shape) != tuple(p.shape):
            raise DataError(
                f"checkpoint parameter {name!r} has shape {arrays[key].shape},"
                f" model expects {tuple(p.shape)}"
            )
        p.data = arrays[key]
        if optimizer and f"adam_m/{name}" in arrays:
            p.adam_m = arrays[f"adam_m/{name}"].astype(p.data.dtype, copy=True)
            p.adam_v = arrays[f"adam_v/{name}"].astype(p.data.dtype, copy=True)
            p.adam_t = int(arrays[f"adam_t/{name}"][0])
    for name, state in model.bn_states().items():
        for suffix, target in (("mean", "running_mean"), ("var", "running_var")):
            key = f"bn/{name}/{suffix}"
            if key not in arrays:
                raise DataError(f"checkpoint is missing batch-norm buffer {key!r}")
            setattr(state, target, arrays[key].astype(state.running_mean.dtype, copy=True))
        state.num_updates = int(arrays[f"bn/{name}/updates"][0])
