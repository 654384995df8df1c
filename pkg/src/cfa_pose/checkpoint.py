"""Parameter checkpoints: a little-endian binary container with a JSON
manifest describing the cascade configuration and every named tensor.

Layout:  magic ``CFA1`` | uint32-LE manifest length | manifest JSON (UTF-8)
| concatenated raw tensor data in manifest order, little-endian.

The writer is byte-deterministic for identical model states, so checkpoint
files of identical runs hash equal.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig
from .cascade import CascadeConfig, CascadePose

MAGIC = b"CFA1"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": ("<f4", torch.float32),
    "float64": ("<f8", torch.float64),
    "int64": ("<i8", torch.int64),
}


def _config_dict(config: CascadeConfig) -> dict:
    return {
        "stage_configs": [asdict(cfg) for cfg in config.stage_configs],
        "fusion_window": config.fusion_window,
        "fusion_mode": config.fusion_mode,
        "rectified_boost": config.rectified_boost,
    }


def _config_from_dict(payload: dict) -> CascadeConfig:
    stage_configs = tuple(
        BackboneConfig(
            stem_channels=cfg["stem_channels"],
            block_channels=tuple(cfg["block_channels"]),
            blocks_per_stage=tuple(cfg["blocks_per_stage"]),
            deconv_kernel=cfg["deconv_kernel"],
            num_joints=cfg["num_joints"],
            stem_blocks=cfg["stem_blocks"],
            preset=cfg.get("preset"),
        )
        for cfg in payload["stage_configs"]
    )
    return CascadeConfig(
        stage_configs=stage_configs,
        fusion_window=payload["fusion_window"],
        fusion_mode=payload["fusion_mode"],
        rectified_boost=payload["rectified_boost"],
    )


def _canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(config: CascadeConfig) -> str:
    return hashlib.sha256(_canonical_json(_config_dict(config)).encode()).hexdigest()


def stage_config_hash(cfg: BackboneConfig) -> str:
    return hashlib.sha256(_canonical_json(asdict(cfg)).encode()).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(model: CascadePose, path, parent_hash: str | None = None) -> None:
    state = model.state_dict()
    tensors = []
    blobs = []
    for name, tensor in state.items():
        dtype = str(tensor.dtype).removeprefix("torch.")
        if dtype not in _DTYPES:
            raise ValueError(f"tensor {name!r} has unsupported dtype {dtype}")
        array = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=_DTYPES[dtype][0])
        tensors.append({"name": name, "shape": list(tensor.shape), "dtype": dtype})
        blobs.append(array.tobytes())
    manifest = {
        "format": FORMAT_VERSION,
        "config": _config_dict(model.config),
        "config_hash": config_hash(model.config),
        "stage_config_hashes": [stage_config_hash(c) for c in model.config.stage_configs],
        "num_stages": model.config.num_stages,
        "fusion_window": model.config.fusion_window,
        "fusion_mode": model.config.fusion_mode,
        "parent_hash": parent_hash,
        "tensors": tensors,
    }
    encoded = _canonical_json(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        for blob in blobs:
            fh.write(blob)


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (length,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(length).decode())


def load_checkpoint(path) -> tuple[CascadePose, dict]:
    """Rebuild the model from a checkpoint; returns (model, manifest)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (length,) = struct.unpack_from("<I", raw, 4)
    manifest = json.loads(raw[8 : 8 + length].decode())
    if manifest.get("format") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')}")
    config = _config_from_dict(manifest["config"])
    model = CascadePose(config)

    state = {}
    offset = 8 + length
    for entry in manifest["tensors"]:
        np_dtype, torch_dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        array = np.frombuffer(raw, dtype=np_dtype, offset=offset, count=count)
        offset += array.nbytes
        tensor = torch.from_numpy(array.copy()).to(torch_dtype).reshape(entry["shape"])
        state[entry["name"]] = tensor
    model.load_state_dict(state, strict=True)
    return model, manifest
