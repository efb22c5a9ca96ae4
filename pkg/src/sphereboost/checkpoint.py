"""Versioned binary checkpoints: model parameters, centers and momentum buffers.

Layout (little-endian): magic, format version, embed_dim, num_classes,
layer shapes and activation tags, then float64 payload (per-layer weight and
bias, centers, then the momentum buffers in the same parameter order), and a
trailing SHA-256 over everything before it.  Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DataFormatError, UnsupportedVersionError
from .model import ACTIVATION_TANH, EmbeddingModel
from .optim import SgdState

MAGIC = b"SBEM"
FORMAT_VERSION = 1

_ACTIVATION_CODES = {ACTIVATION_TANH: 0}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATION_CODES.items()}


def save_checkpoint(path, model: EmbeddingModel, state: SgdState | None = None) -> None:
    state = state or SgdState(model.parameters())
    if len(state.buffers) != len(model.parameters()):
        raise DataFormatError("momentum buffers do not align with model parameters")

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<II", model.embed_dim, model.num_classes)
    blob += struct.pack("<I", len(model.layers))
    for w, _ in model.layers:
        blob += struct.pack("<II", w.shape[0], w.shape[1])
    act = _ACTIVATION_CODES[model.activation]
    blob += bytes([act] * (len(model.layers) - 1))
    for arr in model.parameters() + state.buffers:
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    blob += hashlib.sha256(blob).digest()
    Path(path).write_bytes(bytes(blob))


def checkpoint_digest(path) -> str:
    """Hex digest stored in the checkpoint trailer (verifies the payload)."""
    return Path(path).read_bytes()[-32:].hex()


def load_checkpoint(path) -> tuple[EmbeddingModel, SgdState]:
    buf = Path(path).read_bytes()
    if len(buf) < 36 or buf[:4] != MAGIC:
        raise DataFormatError(f"bad magic {buf[:4]!r} at offset 0; not a checkpoint")
    if hashlib.sha256(buf[:-32]).digest() != buf[-32:]:
        raise CorruptionError("checkpoint checksum mismatch")
    off = 4
    (version,) = struct.unpack_from("<I", buf, off); off += 4
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    embed_dim, num_classes = struct.unpack_from("<II", buf, off); off += 8
    (num_layers,) = struct.unpack_from("<I", buf, off); off += 4
    shapes = []
    for _ in range(num_layers):
        out_dim, in_dim = struct.unpack_from("<II", buf, off); off += 8
        shapes.append((out_dim, in_dim))
    if shapes and shapes[-1][0] != embed_dim:
        raise DataFormatError("final layer width disagrees with embed_dim header")
    act_codes = buf[off:off + num_layers - 1]; off += num_layers - 1
    try:
        activations = {_ACTIVATION_NAMES[c] for c in act_codes} or {ACTIVATION_TANH}
    except KeyError as exc:
        raise DataFormatError(f"unknown activation code {exc}") from None
    if len(activations) != 1:
        raise DataFormatError("mixed hidden activations are not supported")

    def read_array(shape):
        nonlocal off
        n = int(np.prod(shape))
        end = off + 8 * n
        if end > len(buf) - 32:
            raise DataFormatError(f"truncated checkpoint at offset {off}")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off = end
        return arr

    layers = [(read_array(s), read_array((s[0],))) for s in shapes]
    centers = read_array((num_classes, embed_dim))
    model = EmbeddingModel(layers=layers, centers=centers,
                           activation=next(iter(activations)))
    state = SgdState(model.parameters())
    state.buffers = [read_array(p.shape) for p in model.parameters()]
    if off != len(buf) - 32:
        raise DataFormatError(f"trailing data at offset {off} before checksum")
    return model, state
