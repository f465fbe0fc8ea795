"""Binary checkpoints.

Layout (little-endian): magic ``FBNC``, u32 version, 32-byte architecture
fingerprint, u32 tensor count, then per tensor a u16 name length, the UTF-8
name, a u8 rank, u32 dimensions and a float32 payload. A trailing u32 CRC-32
covers every preceding byte.

Parameters, batch-norm statistics and optimizer velocities are stored under
``param/``, ``buffer/`` and ``velocity/``. Bookkeeping lives in float32
tensors under ``meta/``: the epoch, the shuffling generator state split into
16-bit chunks (exact in float32), and the canonical architecture text as
byte values.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, FormatError
from .network import FeedbackNet, FeedbackNetSpec
from .tensor import Rng

MAGIC = b"FBNC"
VERSION = 1
_HEAD = struct.Struct("<4sI32sI")


@dataclass
class Checkpoint:
    fingerprint: bytes
    tensors: dict = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return int(self.tensors["meta/epoch"][0])

    @property
    def rng_state(self):
        chunks = [int(v) for v in self.tensors["meta/rng"]]
        return _join64(chunks[:4]), _join64(chunks[4:])

    @property
    def architecture(self) -> str:
        return bytes(int(v) for v in self.tensors["meta/architecture"]).decode("utf-8")

    def spec(self, **options) -> FeedbackNetSpec:
        spec = FeedbackNetSpec.from_text(self.architecture, **options)
        if spec.fingerprint() != self.fingerprint:
            raise CheckpointError("stored architecture text does not match the checkpoint fingerprint")
        return spec


def _split64(value):
    return [(value >> (16 * i)) & 0xFFFF for i in range(4)]


def _join64(chunks):
    return sum(int(c) << (16 * i) for i, c in enumerate(chunks))


def capture(net: FeedbackNet, velocity: dict, epoch: int, rng: Rng) -> Checkpoint:
    tensors = {}
    for name, p in net.named_parameters():
        tensors[f"param/{name}"] = np.array(p.data, dtype=np.float32)
    for name, b in net.named_buffers():
        tensors[f"buffer/{name}"] = np.array(b, dtype=np.float32)
    for name in sorted(velocity):
        tensors[f"velocity/{name}"] = np.array(velocity[name], dtype=np.float32)
    seed, counter = rng.state()
    tensors["meta/epoch"] = np.array([epoch], dtype=np.float32)
    tensors["meta/rng"] = np.array(_split64(seed) + _split64(counter), dtype=np.float32)
    text = net.spec.to_text().encode("utf-8")
    tensors["meta/architecture"] = np.frombuffer(text, dtype=np.uint8).astype(np.float32)
    return Checkpoint(net.spec.fingerprint(), tensors)


def restore(ckpt: Checkpoint, net: FeedbackNet, velocity: dict | None = None):
    """Load parameters and statistics into ``net``; returns (epoch, shuffling Rng)."""
    if ckpt.fingerprint != net.spec.fingerprint():
        raise CheckpointError(
            f"checkpoint fingerprint {ckpt.fingerprint.hex()[:16]}... does not match the network "
            f"({net.spec.fingerprint().hex()[:16]}...)")
    params = net.parameters()
    for name, p in params.items():
        stored = ckpt.tensors.get(f"param/{name}")
        if stored is None:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if stored.shape != p.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {list(stored.shape)} vs {list(p.shape)}")
        p.data = stored.astype(p.dtype)
        p.grad = None
    net.load_buffers({k[len("buffer/"):]: v for k, v in ckpt.tensors.items() if k.startswith("buffer/")})
    if velocity is not None:
        velocity.clear()
        for k, v in ckpt.tensors.items():
            if k.startswith("velocity/"):
                velocity[k[len("velocity/"):]] = v.copy()
    seed, counter = ckpt.rng_state
    return ckpt.epoch, Rng(seed, counter)


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    if len(ckpt.fingerprint) != 32:
        raise CheckpointError(f"fingerprint must be 32 bytes, got {len(ckpt.fingerprint)}")
    parts = [_HEAD.pack(MAGIC, VERSION, ckpt.fingerprint, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < _HEAD.size + 4:
        raise FormatError("checkpoint shorter than its header", offset=len(blob))
    magic, version, fingerprint, count = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    end = len(blob) - 4
    (stored_crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(blob[:end]) != stored_crc:
        raise FormatError("checkpoint checksum mismatch", offset=end)
    pos, tensors = _HEAD.size, {}

    def need(n, what):
        if pos + n > end:
            raise FormatError(f"truncated checkpoint while reading {what}", offset=pos)

    for i in range(count):
        need(2, f"name length of tensor {i}")
        (length,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(length + 1, f"name of tensor {i}")
        try:
            name = blob[pos : pos + length].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor {i} name is not UTF-8", offset=pos) from None
        pos += length
        ndim = blob[pos]
        pos += 1
        need(4 * ndim, f"dimensions of {name}")
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(nbytes, f"payload of {name}")
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}", offset=pos)
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    if pos != end:
        raise FormatError(f"{end - pos} unexpected bytes after the last tensor", offset=pos)
    return Checkpoint(fingerprint, tensors)


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
