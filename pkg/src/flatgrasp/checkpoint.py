"""FGSP checkpoint files.

Layout (little-endian)::

    b"FGSP" | u32 format version | u32 blob length | JSON blob | f32 arrays | u32 CRC32

The JSON blob carries the run config, the agent architecture, the name and
shape of every array in file order, and free-form metadata (episode index,
optimizer step, trailing rewards).
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig
from .policy import GraspAgent

MAGIC = b"FGSP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    architecture: dict
    arrays: dict[str, np.ndarray]
    meta: dict


def _optimizer_arrays(agent: GraspAgent, optimizer) -> tuple[dict[str, np.ndarray], int]:
    arrays: dict[str, np.ndarray] = {}
    step = 0
    named = [(n, p) for n, p in agent.named_parameters() if p.requires_grad]
    for name, p in named:
        st = optimizer.state.get(p, {})
        if not st:
            continue
        step = int(st["step"])
        arrays[f"optim.exp_avg.{name}"] = st["exp_avg"].detach().cpu().numpy()
        arrays[f"optim.exp_avg_sq.{name}"] = st["exp_avg_sq"].detach().cpu().numpy()
    return arrays, step


def encode(agent: GraspAgent, config: dict, meta: dict | None = None, optimizer=None) -> bytes:
    arrays = {name: t.detach().cpu().numpy() for name, t in agent.state_dict().items()}
    meta = dict(meta or {})
    if optimizer is not None:
        opt_arrays, step = _optimizer_arrays(agent, optimizer)
        arrays.update(opt_arrays)
        meta["optimizer_step"] = step
    blob = json.dumps(
        {
            "config": config,
            "architecture": agent.architecture(),
            "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
            "meta": meta,
        },
        sort_keys=True,
    ).encode()
    body = bytearray(MAGIC)
    body += struct.pack("<II", FORMAT_VERSION, len(blob))
    body += blob
    for a in arrays.values():
        body += np.ascontiguousarray(a, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def decode_bytes(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not an FGSP checkpoint")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    version, blob_len = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + blob_len])
    offset = 12 + blob_len
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = 4 * count
        if offset + nbytes > len(data) - 4:
            raise CheckpointError("truncated checkpoint")
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(spec["shape"]).copy()
        offset += nbytes
    if offset != len(data) - 4:
        raise CheckpointError("trailing bytes in checkpoint")
    return Checkpoint(header["config"], header["architecture"], arrays, header["meta"])


def save(path, agent: GraspAgent, config: dict, meta: dict | None = None, optimizer=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(agent, config, meta, optimizer))
    tmp.replace(path)
    return path


def load(path) -> Checkpoint:
    return decode_bytes(Path(path).read_bytes())


def build_agent(ckpt: Checkpoint) -> GraspAgent:
    arch = ckpt.architecture
    bb = arch["backbone"]
    agent = GraspAgent(
        BackboneConfig(bb["mode"], bb["channels"], bb["seed"], tuple(bb["strides"])),
        arch["ac_mode"],
        arch["hidden"],
    )
    load_into(agent, ckpt)
    return agent


def _structure(arch: dict) -> dict:
    # the init seed is recorded but loaded weights replace whatever it produced
    bb = {k: v for k, v in arch["backbone"].items() if k != "seed"}
    return {**arch, "backbone": bb}


def load_into(agent: GraspAgent, ckpt: Checkpoint, optimizer=None) -> None:
    if _structure(ckpt.architecture) != _structure(agent.architecture()):
        raise CheckpointError(f"architecture mismatch: {ckpt.architecture} vs {agent.architecture()}")
    state = agent.state_dict()
    with torch.no_grad():
        for name, t in state.items():
            if name not in ckpt.arrays or tuple(ckpt.arrays[name].shape) != tuple(t.shape):
                raise CheckpointError(f"missing or misshapen array {name}")
            t.copy_(torch.from_numpy(ckpt.arrays[name]).to(t.dtype))
    if optimizer is None:
        return
    step = ckpt.meta.get("optimizer_step", 0)
    named = [(n, p) for n, p in agent.named_parameters() if p.requires_grad]
    opt_state = optimizer.state_dict()
    state_entries = {}
    for i, (name, p) in enumerate(named):
        key = f"optim.exp_avg.{name}"
        if key not in ckpt.arrays:
            continue
        state_entries[i] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(ckpt.arrays[key].copy()),
            "exp_avg_sq": torch.from_numpy(ckpt.arrays[f"optim.exp_avg_sq.{name}"].copy()),
        }
    opt_state["state"] = state_entries
    optimizer.load_state_dict(opt_state)
