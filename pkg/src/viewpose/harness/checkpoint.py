"""Binary checkpoint format.

Layout: magic "VPCK", u32 version, u64 header length, JSON header, raw
payload. The header carries the step counter, a config snapshot, base64
RNG state, optimizer metadata, and a tensor manifest (name, shape, byte
offset). Every tensor is little-endian float32; codebook entries are
additionally prefixed with their K and d as little-endian u32, as the
manifest records.

A checkpoint restores training bitwise: load(save(state)) resumes with an
identical next-step loss.
"""

from __future__ import annotations

import base64
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"VPCK"
VERSION = 1


def _named_f32(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().numpy().astype("<f4")
        for name, tensor in module.state_dict().items()
    }


def _optimizer_tensors(optimizer, param_names: list[str]):
    """Flatten AdamW state into named f32 tensors plus scalar metadata."""
    tensors: dict[str, np.ndarray] = {}
    meta: dict = {"steps": {}, "param_groups": []}
    state = optimizer.state_dict()
    for group in state["param_groups"]:
        meta["param_groups"].append({k: v for k, v in group.items() if k != "params"})
    for idx, slot_state in state["state"].items():
        name = param_names[idx]
        for key, value in slot_state.items():
            if key == "step":
                meta["steps"][name] = float(value)
            else:
                tensors[f"opt.{name}.{key}"] = (
                    value.detach().cpu().numpy().astype("<f4")
                )
    return tensors, meta


def save_checkpoint(
    path: str | Path,
    step: int,
    config: dict,
    model: torch.nn.Module,
    optimizer=None,
    codebook_names: tuple[str, ...] = ("codebook.vectors",),
    extra: dict | None = None,
) -> None:
    tensors = _named_f32(model)
    param_names = [name for name, _ in model.named_parameters()]
    opt_meta = None
    if optimizer is not None:
        opt_tensors, opt_meta = _optimizer_tensors(optimizer, param_names)
        tensors.update(opt_tensors)

    manifest = []
    payload = bytearray()
    for name, array in tensors.items():
        is_codebook = name in codebook_names
        entry = {
            "name": name,
            "shape": list(array.shape),
            "offset": len(payload),
            "kind": "codebook" if is_codebook else "f32",
        }
        if is_codebook:
            k, d = array.shape
            payload += struct.pack("<II", k, d)
        payload += array.tobytes(order="C")
        manifest.append(entry)

    header = {
        "version": VERSION,
        "step": step,
        "config": config,
        "rng": {"torch": base64.b64encode(
            torch.get_rng_state().numpy().tobytes()
        ).decode("ascii")},
        "optimizer": opt_meta,
        "extra": extra or {},
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(bytes(payload))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (header, named float32 arrays)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16: 16 + header_len].decode("utf-8"))
    payload = raw[16 + header_len:]
    tensors = {}
    for entry in header["tensors"]:
        offset = entry["offset"]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if entry["kind"] == "codebook":
            k, d = struct.unpack_from("<II", payload, offset)
            if (k, d) != shape:
                raise ValueError(
                    f"{path}: codebook prefix {(k, d)} disagrees with manifest {shape}"
                )
            offset += 8
        array = np.frombuffer(
            payload, dtype="<f4", count=count, offset=offset
        ).reshape(shape)
        tensors[entry["name"]] = array
    return header, tensors


def load_into(
    path: str | Path,
    model: torch.nn.Module,
    optimizer=None,
    restore_rng: bool = False,
) -> dict:
    """Restore model (and optionally optimizer and RNG) state; returns header."""
    header, tensors = read_checkpoint(path)
    state = {
        name: torch.from_numpy(np.array(tensors[name]))
        for name in model.state_dict()
    }
    model.load_state_dict(state)

    if optimizer is not None and header.get("optimizer"):
        param_names = [name for name, _ in model.named_parameters()]
        name_to_idx = {name: i for i, name in enumerate(param_names)}
        meta = header["optimizer"]
        opt_state: dict = {"state": {}, "param_groups": []}
        current_groups = optimizer.state_dict()["param_groups"]
        for group, saved in zip(current_groups, meta["param_groups"]):
            merged = dict(group)
            merged.update(saved)
            opt_state["param_groups"].append(merged)
        for name, step_value in meta["steps"].items():
            idx = name_to_idx[name]
            slot = {"step": torch.tensor(step_value)}
            for key in ("exp_avg", "exp_avg_sq"):
                tensor_name = f"opt.{name}.{key}"
                if tensor_name in tensors:
                    slot[key] = torch.from_numpy(np.array(tensors[tensor_name]))
            opt_state["state"][idx] = slot
        optimizer.load_state_dict(opt_state)

    if restore_rng:
        blob = base64.b64decode(header["rng"]["torch"])
        torch.set_rng_state(torch.from_numpy(np.frombuffer(blob, dtype=np.uint8).copy()))
    return header


def describe(path: str | Path) -> str:
    """Human-readable checkpoint summary for the CLI."""
    header, tensors = read_checkpoint(path)
    lines = [
        f"checkpoint version {header['version']}, step {header['step']}",
        f"config: {json.dumps(header['config'], sort_keys=True)[:400]}",
        f"tensors ({len(header['tensors'])}):",
    ]
    total = 0
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        total += count
        lines.append(
            f"  {entry['name']:50s} {str(entry['shape']):20s} {entry['kind']}"
        )
    lines.append(f"total parameters: {total}")
    return "\n".join(lines)
