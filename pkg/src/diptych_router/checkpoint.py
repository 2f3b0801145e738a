"""Checkpoint file: magic, u64 header length, UTF-8 JSON header, float32 LE blob.

The header's ``manifest`` lists every tensor in blob order with its shape and
element offset. Names are ``base.*`` for backbone weights and
``lora.subject.*`` / ``lora.image.*`` for the adapter branches.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, ToyMMDiT

MAGIC = b"DRCKPT01"
FORMAT_VERSION = 1


def manifest_name(param_name: str) -> str:
    parts = param_name.split(".")
    for branch in ("subject", "image"):
        if branch in parts[:-1] and parts[-1] in ("down", "up"):
            i = parts.index(branch)
            return ".".join(["lora", branch] + parts[:i] + parts[i + 1 :])
    return "base." + param_name


def param_name(manifest: str) -> str:
    parts = manifest.split(".")
    if parts[0] == "base":
        return ".".join(parts[1:])
    if parts[0] == "lora":
        branch, rest = parts[1], parts[2:]
        return ".".join(rest[:-1] + [branch, rest[-1]])
    raise ValueError(f"unrecognised manifest key {manifest!r}")


def state_arrays(model: ToyMMDiT) -> dict[str, np.ndarray]:
    return {manifest_name(k): v.detach().to(torch.float32).numpy() for k, v in model.state_dict().items()}


def save_checkpoint(path: str | Path, model: ToyMMDiT, step: int = 0, stage: int | str = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    arrays = state_arrays(model)
    manifest, offset = [], 0
    for name, arr in arrays.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    header = {
        "format": FORMAT_VERSION,
        "config": model.config.to_json(),
        "step": int(step),
        "stage": stage,
        "manifest": manifest,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    data = np.frombuffer(blob, dtype="<f4", offset=16 + hlen)
    arrays = {}
    for entry in header["manifest"]:
        start, count = entry["offset"], entry["count"]
        if start + count > data.size:
            raise ValueError(f"{path}: blob truncated at {entry['name']}")
        arrays[entry["name"]] = data[start : start + count].reshape(entry["shape"]).copy()
    return header, arrays


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> tuple[ToyMMDiT, dict]:
    """Rebuild the model stored in ``path``.

    ``config`` may override LoRA layout fields (e.g. to load a base checkpoint
    into a model with a different adapter arrangement); adapter tensors that
    do not exist in the file keep their fresh initialisation.
    """
    header, arrays = read_checkpoint(path)
    config = config or ModelConfig.from_json(header["config"])
    model = ToyMMDiT(config)
    state = model.state_dict()
    for name, arr in arrays.items():
        key = param_name(name)
        if key not in state:
            if name.startswith("lora."):
                continue
            raise ValueError(f"{path}: unexpected tensor {name}")
        if tuple(state[key].shape) != arr.shape:
            raise ValueError(f"{path}: {name} has shape {arr.shape}, model expects {tuple(state[key].shape)}")
        state[key] = torch.from_numpy(arr)
    model.load_state_dict(state)
    return model, header
