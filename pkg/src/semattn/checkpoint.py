"""Versioned binary checkpoint container.

Layout: 4-byte magic, u32 header length, UTF-8 JSON header, then raw
little-endian blob bytes back to back.  The header carries format_version,
the model config, the training stage, epoch, optimizer scalars, numpy RNG
state, and a directory of named blobs (name, dtype, shape, nbytes).  Blob
names are module paths ("param/rgb.backbone.conv1.weight", with optimizer
velocities under "optim/" and the torch RNG state under "rng/torch").
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .errors import FormatError
from .ioutil import atomic_write_bytes

MAGIC = b"SACP"
FORMAT_VERSION = 1

STAGES = ("branch_rgb", "branch_semantic", "fusion")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    stage: str
    epoch: int
    params: dict[str, np.ndarray]  # model state_dict (parameters + buffers)
    optimizer_hyper: dict = field(default_factory=dict)
    optimizer_velocities: dict[str, np.ndarray] = field(default_factory=dict)
    torch_rng: np.ndarray | None = None  # uint8 snapshot of torch generator state
    numpy_rng: dict | None = None
    format_version: int = FORMAT_VERSION

    def state_dict_tensors(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}


def _dtype_tag(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    return dt.str


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    if ckpt.stage not in STAGES:
        raise FormatError(f"unknown stage {ckpt.stage!r}")
    blobs: list[tuple[str, np.ndarray]] = []
    for name, arr in ckpt.params.items():
        blobs.append((f"param/{name}", arr))
    for name, arr in ckpt.optimizer_velocities.items():
        blobs.append((f"optim/velocity/{name}", arr))
    if ckpt.torch_rng is not None:
        blobs.append(("rng/torch", ckpt.torch_rng))

    directory = []
    payload = io.BytesIO()
    for name, arr in blobs:
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        directory.append(
            {
                "name": name,
                "dtype": _dtype_tag(arr),
                "shape": list(arr.shape),
                "nbytes": len(raw),
            }
        )
        payload.write(raw)

    header = {
        "format_version": ckpt.format_version,
        "model_config": ckpt.model_config.to_dict(),
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "optimizer": ckpt.optimizer_hyper,
        "numpy_rng": ckpt.numpy_rng,
        "blobs": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    out = MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + payload.getvalue()
    atomic_write_bytes(path, out)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack_from("<I", data, 4)
    start = 8
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {header.get('format_version')}")

    offset = start + header_len
    params: dict[str, np.ndarray] = {}
    velocities: dict[str, np.ndarray] = {}
    torch_rng = None
    for entry in header["blobs"]:
        nbytes = entry["nbytes"]
        raw = data[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise FormatError(f"{path}: truncated blob {entry['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        offset += nbytes
        name = entry["name"]
        if name.startswith("param/"):
            params[name[len("param/"):]] = arr
        elif name.startswith("optim/velocity/"):
            velocities[name[len("optim/velocity/"):]] = arr
        elif name == "rng/torch":
            torch_rng = arr
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes after blobs")

    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        stage=header["stage"],
        epoch=header["epoch"],
        params=params,
        optimizer_hyper=header.get("optimizer") or {},
        optimizer_velocities=velocities,
        torch_rng=torch_rng,
        numpy_rng=header.get("numpy_rng"),
    )


def model_state_to_numpy(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def load_state_into(model: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in params.items()}
    model.load_state_dict(state)
