"""Reader/writer for the `.sem` sparse score-tensor file format.

Layout (little-endian):

    magic   "SEM1"                      4 bytes
    height  u32
    width   u32
    L       u32
    pixels  h*w records, row-major, each {3 x u16 label, 3 x f32 score}
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .ioutil import atomic_write_bytes
from .score_tensor import TOP_K, SemanticScoreTensor

MAGIC = b"SEM1"
_HEADER = struct.Struct("<4sIII")

_RECORD_DTYPE = np.dtype(
    [("labels", "<u2", (TOP_K,)), ("scores", "<f4", (TOP_K,))]
)


def write_sem(path: str | Path, tensor: SemanticScoreTensor) -> None:
    if tensor.num_classes > 65535:
        raise FormatError("label space too large for u16 storage")
    if tensor.labels.max(initial=0) >= tensor.num_classes:
        raise FormatError("label index out of range for declared L")
    h, w = tensor.height, tensor.width
    records = np.empty((h, w), dtype=_RECORD_DTYPE)
    records["labels"] = tensor.labels
    records["scores"] = tensor.scores
    payload = _HEADER.pack(MAGIC, h, w, tensor.num_classes) + records.tobytes()
    atomic_write_bytes(path, payload)


def read_sem(path: str | Path) -> SemanticScoreTensor:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, h, w, num_classes = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + h * w * _RECORD_DTYPE.itemsize
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    records = np.frombuffer(data, dtype=_RECORD_DTYPE, offset=_HEADER.size).reshape(h, w)
    labels = records["labels"].astype(np.int64)
    if labels.max(initial=0) >= num_classes:
        raise FormatError(f"{path}: label index out of range [0, {num_classes})")
    return SemanticScoreTensor(labels, records["scores"].copy(), num_classes)
