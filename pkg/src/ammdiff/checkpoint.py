"""Versioned checkpoint container.

Layout: an 8-byte magic, a little-endian u64 header length, a UTF-8 JSON
header, then an uncompressed ``.npz`` payload of named arrays. The header
carries the format version, a config echo, the parameter group layout and a
SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"AMMCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def write_container(path, arrays: dict, header: dict):
    buf = io.BytesIO()
    np.savez(buf, **{k: np.ascontiguousarray(v) for k, v in sorted(arrays.items())})
    payload = buf.getvalue()
    header = dict(header)
    header["version"] = header.get("version", FORMAT_VERSION)
    header["sha256"] = hashlib.sha256(payload).hexdigest()
    header["payload_bytes"] = len(payload)
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".incomplete")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict]:
    """Return (header, arrays); raises CheckpointError on any inconsistency."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint: unreadable header") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"version mismatch: file has {header.get('version')!r}, expected {FORMAT_VERSION}")
    payload = raw[16 + n:]
    if len(payload) != header.get("payload_bytes") or hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError("corrupt checkpoint: payload truncated or checksum mismatch")
    with np.load(io.BytesIO(payload), allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    return header, arrays


def module_arrays(module: torch.nn.Module, prefix: str) -> dict:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict, prefix: str):
    state = {k[len(prefix) + 1:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix + "/")}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"config mismatch: parameters for {prefix!r} do not fit the model ({exc})") from exc


def optimizer_arrays(opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    """Split an optimizer state dict into arrays plus a JSON-able remainder."""
    sd = opt.state_dict()
    arrays, meta = {}, {"param_groups": sd["param_groups"], "state_keys": {}}
    for idx, st in sd["state"].items():
        keys = []
        for k, v in st.items():
            arrays[f"optimizer/{idx}/{k}"] = torch.as_tensor(v).detach().cpu().numpy().copy()
            keys.append(k)
        meta["state_keys"][str(idx)] = keys
    return arrays, meta


def load_optimizer_arrays(opt: torch.optim.Optimizer, arrays: dict, meta: dict):
    state = {}
    for idx, keys in meta["state_keys"].items():
        state[int(idx)] = {k: torch.from_numpy(arrays[f"optimizer/{idx}/{k}"].copy()) for k in keys}
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
