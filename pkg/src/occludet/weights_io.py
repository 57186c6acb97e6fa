"""Byte-stable weight archives.

Format (documented contract, version 1):

* 8 magic bytes ``ODWA0001``
* 8-byte little-endian header length
* canonical JSON header: ``{"meta": {...}, "arrays": [{name, dtype, shape,
  offset, nbytes}, ...]}`` with arrays sorted by name and offsets into the
  payload that follows
* the raw little-endian array bytes, concatenated in header order

Canonical JSON (sorted keys, no whitespace) plus name-sorted arrays make the
file a pure function of its contents, so identical runs produce identical
bytes. ``meta`` always carries a ``config_hash`` over the model configuration.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import DataError

MAGIC = b"ODWA0001"


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(canonical_json(dict(config)).encode()).hexdigest()


def save_archive(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = canonical_json({"meta": dict(meta), "arrays": entries}).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read weight archive: {exc}") from exc
    if len(data) < 16 or data[:8] != MAGIC:
        raise DataError(f"{path}: not a weight archive (bad magic)")
    header_len = int.from_bytes(data[8:16], "little")
    try:
        header = json.loads(data[16 : 16 + header_len])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt archive header: {exc}") from exc
    payload = data[16 + header_len :]
    arrays = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise DataError(f"{path}: archive truncated at array {entry['name']!r}")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header["meta"]


# --- detector snapshots ------------------------------------------------------------


def state_dict_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: tensor.detach().numpy().copy() for name, tensor in module.state_dict().items()}


def load_state_dict_arrays(module: torch.nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    state = {}
    for name, _ in module.state_dict().items():
        key = prefix + name
        if key not in arrays:
            raise DataError(f"archive missing array {key!r}")
        state[name] = torch.from_numpy(np.asarray(arrays[key]))
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise DataError(f"weight shapes incompatible with model: {exc}") from exc


def save_detector(path: str | Path, net: torch.nn.Module, config, kind: str, extra_meta: Mapping | None = None) -> None:
    """Snapshot a frame ("frame") or video ("video") detector with its config."""
    cfg_dict = config.to_dict()
    meta = {
        "format": "occludet-weights-v1",
        "kind": kind,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
    }
    if extra_meta:
        meta.update(dict(extra_meta))
    save_archive(path, state_dict_arrays(net), meta)


def load_detector(path: str | Path):
    """Rebuild the saved detector; returns (net, config, meta)."""
    from .frame_detector import DetectorConfig, FrameDetectorNet
    from .video_detector import VideoDetectorNet

    arrays, meta = load_archive(path)
    if meta.get("format") != "occludet-weights-v1":
        raise DataError(f"{path}: unsupported weight format {meta.get('format')!r}")
    cfg = DetectorConfig.from_dict(meta["config"])
    kind = meta.get("kind")
    if kind == "frame":
        net = FrameDetectorNet(cfg)
    elif kind == "video":
        net = VideoDetectorNet(cfg)
    else:
        raise DataError(f"{path}: unknown detector kind {kind!r}")
    model_arrays = {k[len("model.") :]: v for k, v in arrays.items() if k.startswith("model.")}
    if model_arrays:
        load_state_dict_arrays(net, model_arrays)
    else:
        load_state_dict_arrays(net, arrays)
    net.eval()
    return net, cfg, meta


# --- training checkpoints ------------------------------------------------------------


def pack_optimizer(optimizer: torch.optim.Optimizer, net: torch.nn.Module) -> dict[str, np.ndarray]:
    name_of = {id(p): n for n, p in net.named_parameters()}
    arrays = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p, {})
            buf = state.get("momentum_buffer")
            if buf is not None:
                arrays[f"opt.momentum.{name_of[id(p)]}"] = buf.detach().numpy().copy()
    return arrays


def unpack_optimizer(optimizer: torch.optim.Optimizer, net: torch.nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    params = dict(net.named_parameters())
    for key, value in arrays.items():
        if not key.startswith("opt.momentum."):
            continue
        name = key[len("opt.momentum.") :]
        if name not in params:
            raise DataError(f"checkpoint momentum for unknown parameter {name!r}")
        optimizer.state[params[name]]["momentum_buffer"] = torch.from_numpy(np.asarray(value).copy())


def pack_rng(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))


def unpack_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def save_checkpoint(
    path: str | Path,
    net: torch.nn.Module,
    config,
    kind: str,
    optimizer: torch.optim.Optimizer,
    scheduler,
    rng: np.random.Generator,
    progress: Mapping,
) -> None:
    """Everything needed to resume training bit-exactly."""
    arrays = {f"model.{k}": v for k, v in state_dict_arrays(net).items()}
    arrays.update(pack_optimizer(optimizer, net))
    cfg_dict = config.to_dict()
    meta = {
        "format": "occludet-weights-v1",
        "kind": kind,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "checkpoint": {
            "lr": optimizer.param_groups[0]["lr"],
            "scheduler": scheduler.state_dict(),
            "rng": pack_rng(rng),
            **dict(progress),
        },
    }
    save_archive(path, arrays, meta)


def load_checkpoint(path: str | Path):
    """Returns (net, config, meta, arrays); optimizer/rng restore is the caller's."""
    net, cfg, meta = load_detector(path)
    arrays, _ = load_archive(path)
    if "checkpoint" not in meta:
        raise DataError(f"{path}: archive has no checkpoint section")
    return net, cfg, meta, arrays
