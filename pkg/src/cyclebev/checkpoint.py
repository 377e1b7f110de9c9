"""Single-file checkpoints: a JSON manifest followed by raw tensor payloads.

Layout::

    b"CBCKPT01" | uint64 LE header length | header JSON | payload

Tensors are stored little-endian, row-major, back to back; the header lists
name, dtype, shape and byte offset for each and a sha256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CBCKPT01"


class CheckpointError(Exception):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path, tensors: dict[str, torch.Tensor], manifest: dict) -> Path:
    path = Path(path)
    index = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        raw = arr.tobytes(order="C")
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = dict(manifest)
    header["tensors"] = index
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    blob = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_hash: str | None = None
                    ) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    payload = data[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    if expected_hash is not None and header.get("config_hash") != expected_hash:
        raise ConfigMismatchError(
            f"{path}: architecture hash {header.get('config_hash')} != expected {expected_hash}"
        )
    tensors = {}
    for entry in header.pop("tensors"):
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return tensors, header


def module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    state = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
    if not state:
        raise CheckpointError(f"checkpoint has no tensors for {prefix!r}")
    module.load_state_dict(state)


def optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    """Split an optimizer state dict into tensors and a JSON-able remainder."""
    sd = opt.state_dict()
    tensors, meta_state = {}, {}
    for pid, st in sd["state"].items():
        entry = {}
        for key, val in st.items():
            if torch.is_tensor(val):
                tensors[f"{prefix}/state/{pid}/{key}"] = val
            else:
                entry[key] = val
        meta_state[str(pid)] = entry
    return tensors, {"param_groups": sd["param_groups"], "state": meta_state}


def restore_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict, meta: dict) -> None:
    state: dict[int, dict] = {int(k): dict(v) for k, v in meta["state"].items()}
    for name, val in tensors.items():
        if not name.startswith(prefix + "/state/"):
            continue
        pid, key = name[len(prefix) + 7:].split("/", 1)
        state.setdefault(int(pid), {})[key] = val
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
