"""Binary serialization of trained stage parameters.

One file per stage. Weights are stored as little-endian 32-bit floats
(training runs in 64-bit); loading therefore reproduces forward outputs
to about 1e-7 relative, comfortably inside the 1e-6 round-trip contract.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (CheckpointError, CheckpointVersionError, ConfigError,
                         DigestMismatchError, ShapeError)

MAGIC = b"EQSN"
FORMAT_VERSION = 1
STAGE_TAGS = ("eqrnn", "gta", "snn")

_HEADER = struct.Struct("<4sI")


@dataclass
class Checkpoint:
    """In-memory image of one stage's trained state."""

    stage: str
    seed: int
    dims: tuple
    arrays: dict
    digest: bytes = b""
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.stage not in STAGE_TAGS:
            raise ConfigError(f"unknown stage tag {self.stage!r}; "
                              f"expected one of {STAGE_TAGS}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        self.dims = tuple(int(d) for d in self.dims)
        if any(d < 1 for d in self.dims):
            raise ConfigError("layer dimensions must be positive")


def _pack_bytes(buf: bytearray, payload: bytes):
    if len(payload) > 0xFFFF:
        raise CheckpointError("field too long to serialize")
    buf += struct.pack("<H", len(payload))
    buf += payload


def _pack_str(buf: bytearray, text: str):
    _pack_bytes(buf, text.encode("utf-8"))


class _Reader:
    """Bounds-checked cursor over a byte string."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if n < 0 or end > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos:end]
        self.pos = end
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def take_bytes(self) -> bytes:
        (n,) = self.unpack("<H")
        return self.take(n)

    def take_str(self) -> str:
        raw = self.take_bytes()
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("undecodable text field") from exc

    def done(self):
        if self.pos != len(self.blob):
            raise CheckpointError(
                f"{len(self.blob) - self.pos} trailing bytes after payload")


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = bytearray()
    buf += _HEADER.pack(MAGIC, ckpt.version)
    _pack_str(buf, ckpt.stage)
    buf += struct.pack("<Q", ckpt.seed)
    _pack_bytes(buf, ckpt.digest)
    buf += struct.pack("<I", len(ckpt.dims))
    for d in ckpt.dims:
        buf += struct.pack("<I", d)
    buf += struct.pack("<I", len(ckpt.arrays))
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        _pack_str(buf, name)
        buf += struct.pack("<B", arr.ndim)
        for extent in arr.shape:
            buf += struct.pack("<I", extent)
        buf += arr.astype("<f4").tobytes(order="C")
    return bytes(buf)


def from_bytes(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    magic, version = r.unpack("<4sI")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"format version {version} unsupported; this build reads "
            f"version {FORMAT_VERSION}")
    stage = r.take_str()
    if stage not in STAGE_TAGS:
        raise CheckpointError(f"unknown stage tag {stage!r}")
    (seed,) = r.unpack("<Q")
    digest = r.take_bytes()
    (n_dims,) = r.unpack("<I")
    dims = tuple(r.unpack("<I")[0] for _ in range(n_dims))
    (n_arrays,) = r.unpack("<I")
    arrays = {}
    for _ in range(n_arrays):
        name = r.take_str()
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack("<I")[0] for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r.take(count * 4)
        arrays[name] = np.frombuffer(raw, dtype="<f4").astype(
            np.float64).reshape(shape)
    r.done()
    return Checkpoint(stage=stage, seed=seed, dims=dims, arrays=arrays,
                      digest=digest, version=version)


def save_checkpoint(path, ckpt: Checkpoint):
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path, expect_digest: bytes | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    ckpt = from_bytes(blob)
    if expect_digest is not None and ckpt.digest != expect_digest:
        raise DigestMismatchError(
            "checkpoint was written under a different configuration")
    return ckpt


def from_params(stage: str, named, dims, seed: int,
                digest: bytes = b"") -> Checkpoint:
    """Snapshot a named-parameter dict of Tensors (or arrays)."""
    arrays = {}
    for name, p in named.items():
        data = p.data if hasattr(p, "data") else p
        arrays[name] = np.array(data, dtype=np.float64)
    return Checkpoint(stage=stage, seed=seed, dims=tuple(dims),
                      arrays=arrays, digest=digest)


def restore_params(ckpt: Checkpoint, named):
    """Copy checkpoint arrays into an existing named-parameter dict."""
    missing = sorted(set(named) - set(ckpt.arrays))
    extra = sorted(set(ckpt.arrays) - set(named))
    if missing or extra:
        raise CheckpointError(
            f"parameter names disagree: missing {missing}, extra {extra}")
    for name, p in named.items():
        value = ckpt.arrays[name]
        if p.data.shape != value.shape:
            raise ShapeError(f"{name}: checkpoint shape {value.shape} vs "
                             f"model shape {p.data.shape}")
        p.data = value.copy()
