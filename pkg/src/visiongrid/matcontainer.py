"""Binary container for feature matrices and classifier models.

Matrix block layout::

    magic "CCVM1" | u32 rows (LE) | u32 cols (LE) | rows*cols f64 (LE, row-major)

A block with ``cols == 0`` holds ``rows`` UTF-8 strings instead of floats,
each prefixed with a u32 byte length; model files are three consecutive
blocks: labels, weight matrix W (K x D), bias column b (K x 1).
"""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"CCVM1"

_HEADER = struct.Struct("<II")
_U32 = struct.Struct("<I")


def write_matrix(matrix: np.ndarray) -> bytes:
    """Serialize a 2-D float array to one container block."""
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {matrix.shape}")
    rows, cols = m.shape
    if cols == 0:
        raise ValueError("cols must be >= 1 (0 is reserved for label blocks)")
    return MAGIC + _HEADER.pack(rows, cols) + m.tobytes()


def write_labels(labels: list[str] | tuple[str, ...]) -> bytes:
    """Serialize a label list as a block with cols == 0."""
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_HEADER.pack(len(labels), 0))
    for label in labels:
        raw = label.encode("utf-8")
        out.write(_U32.pack(len(raw)))
        out.write(raw)
    return out.getvalue()


def read_block(stream: io.BufferedIOBase):
    """Read one block; returns an ndarray or a list of strings."""
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"bad container magic {magic!r}")
    header = stream.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise ValueError("truncated container header")
    rows, cols = _HEADER.unpack(header)
    if cols == 0:
        labels = []
        for _ in range(rows):
            (n,) = _U32.unpack(stream.read(_U32.size))
            labels.append(stream.read(n).decode("utf-8"))
        return labels
    raw = stream.read(rows * cols * 8)
    if len(raw) != rows * cols * 8:
        raise ValueError("truncated container payload")
    return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()


def read_matrix(data: bytes) -> np.ndarray:
    block = read_block(io.BytesIO(data))
    if not isinstance(block, np.ndarray):
        raise ValueError("block holds labels, not a matrix")
    return block


def write_model(labels, weights: np.ndarray, biases: np.ndarray) -> bytes:
    """Serialize (labels, W, b) as three consecutive blocks."""
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(biases, dtype=np.float64).reshape(-1, 1)
    if w.shape[0] != len(labels) or b.shape[0] != len(labels):
        raise ValueError("labels, W rows and b entries must agree")
    return write_labels(list(labels)) + write_matrix(w) + write_matrix(b)


def read_model(data: bytes):
    """Inverse of :func:`write_model`; returns (labels, W, b)."""
    stream = io.BytesIO(data)
    labels = read_block(stream)
    if not isinstance(labels, list):
        raise ValueError("model file must start with a label block")
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"bad container magic {magic!r}")
    rows, cols = _HEADER.unpack(stream.read(_HEADER.size))
    w = np.frombuffer(stream.read(rows * cols * 8), dtype="<f8").reshape(rows, cols).copy()
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"bad container magic {magic!r}")
    rows, cols = _HEADER.unpack(stream.read(_HEADER.size))
    b = np.frombuffer(stream.read(rows * cols * 8), dtype="<f8").reshape(rows, cols).copy()
    return labels, w, b.reshape(-1)
