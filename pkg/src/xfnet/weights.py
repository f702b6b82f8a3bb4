"""Binary checkpoint format for model parameters and batch-norm statistics.

Layout (all integers little-endian u32, payloads little-endian float32):

    magic b"XFN1" | version | config fingerprint (32 raw sha256 bytes)
    | record count | records...

    record := name_len | name utf-8 | rank | dims... | values

Records cover every trainable parameter plus every running statistic, keyed
by their dotted registry names.  Loading parses and validates the whole file
before touching the model, so a corrupt checkpoint can never leave a model
half-updated.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .config import config_fingerprint
from .model import Model

MAGIC = b"XFN1"
VERSION = 1


def _entries(model: Model) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in model.params().items()}
    for name, b in model.buffers().items():
        if name in out:
            raise ValueError(f"parameter/buffer name collision: {name}")
        out[name] = b
    return out


def save_weights(model: Model, path) -> None:
    """Write all parameters and buffers; the file appears atomically."""
    path = os.fspath(path)
    chunks = [MAGIC, struct.pack("<I", VERSION),
              config_fingerprint(model.cfg)]
    entries = _entries(model)
    chunks.append(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError(f"truncated weight file {self.path}: wanted {n} bytes "
                             f"at offset {self.pos}, have {len(self.blob) - self.pos}")
        piece = self.blob[self.pos:self.pos + n]
        self.pos += n
        return piece

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_weights(path) -> tuple[bytes, dict[str, np.ndarray]]:
    """Parse a checkpoint; returns (config fingerprint, name -> array)."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != MAGIC:
        raise ValueError(f"{path} is not a weight file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise ValueError(f"{path}: unsupported weight format version {version}")
    fingerprint = r.take(32)
    count = r.u32()
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        if name in entries:
            raise ValueError(f"{path}: duplicate record {name}")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        n_values = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = r.take(4 * n_values)
        entries[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.pos != len(r.blob):
        raise ValueError(f"{path}: {len(r.blob) - r.pos} trailing bytes after "
                         f"the last record")
    return fingerprint, entries


def load_weights(path, model: Model, allow_fingerprint_mismatch: bool = False) -> None:
    """Restore a checkpoint into ``model``; all-or-nothing.

    The stored config fingerprint must match the model's unless explicitly
    waived; the record names must match the model registry exactly either way.
    """
    fingerprint, entries = read_weights(path)
    expected = config_fingerprint(model.cfg)
    if fingerprint != expected and not allow_fingerprint_mismatch:
        raise ValueError(f"{os.fspath(path)} was saved from a different model "
                         f"configuration (fingerprint mismatch)")
    params = model.params()
    targets = {name: p.data for name, p in params.items()}
    targets.update(model.buffers())
    missing = sorted(set(targets) - set(entries))
    unexpected = sorted(set(entries) - set(targets))
    if missing or unexpected:
        raise ValueError(f"weight file does not match the model: "
                         f"missing {missing}, unexpected {unexpected}")
    for name, arr in entries.items():
        if arr.shape != targets[name].shape:
            raise ValueError(f"shape mismatch for {name}: file {arr.shape}, "
                             f"model {targets[name].shape}")
    for name, p in params.items():
        p.data = entries[name].astype(p.data.dtype)
    model.load_buffers(entries)
