"""Binary file formats: latent datasets, checkpoints and PPM previews.

Every integer and float is little-endian. All writers go through
:func:`atomic_write` so a crash never leaves a truncated file behind.

LatentDataset layout::

    "UDLT" | version u32 | count u32 | channels u32 | height u32 | width u32
    | num_classes u32 | reserved u32
    count x (label u32 | channels*height*width f32)

Checkpoint layout::

    "UDCK" | version u32 | config sha256 (32 bytes) | step u64
    | meta_len u32 | meta JSON (utf-8)
    | n_entries u32 | n_entries x (name_len u16 | name | dtype u8 | rank u8 | extents u32[rank] | offset u64)
    | payload_len u64 | payload f32 | crc32(payload) u32
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "DigestMismatch",
    "atomic_write",
    "write_dataset",
    "read_dataset",
    "dataset_nbytes",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "encode_checkpoint",
    "decode_checkpoint",
    "ppm_bytes",
    "write_ppm",
]

DATASET_MAGIC = b"UDLT"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<4s7I")

CKPT_MAGIC = b"UDCK"
CKPT_VERSION = 1
_DTYPE_F32 = 0


class FormatError(ValueError):
    """Malformed, truncated or corrupted file."""


class DigestMismatch(FormatError):
    """Checkpoint was written for a different model configuration."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- latent datasets ---------------------------------------------------------


def dataset_nbytes(count: int, c: int, h: int, w: int) -> int:
    return _DS_HEADER.size + count * (4 + 4 * c * h * w)


def write_dataset(path, x: np.ndarray, labels: np.ndarray, num_classes: int) -> None:
    x = np.asarray(x)
    labels = np.asarray(labels)
    if x.ndim != 4:
        raise ValueError(f"latents must be (N, C, H, W), got shape {x.shape}")
    if labels.shape != (x.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {x.shape[0]} latents")
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    n, c, h, w = x.shape
    rec = np.dtype([("label", "<u4"), ("data", "<f4", (c, h, w))])
    arr = np.empty(n, dtype=rec)
    arr["label"] = labels
    arr["data"] = x
    header = _DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, c, h, w, num_classes, 0)
    atomic_write(path, header + arr.tobytes())


def read_dataset(path) -> tuple[np.ndarray, np.ndarray, int]:
    """Returns (latents float32 (N, C, H, W), labels int64, num_classes)."""
    raw = Path(path).read_bytes()
    if len(raw) < _DS_HEADER.size:
        raise FormatError(f"{path}: file too short for a dataset header")
    magic, version, n, c, h, w, k, _ = _DS_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    expected = dataset_nbytes(n, c, h, w)
    if len(raw) != expected:
        raise FormatError(f"{path}: length {len(raw)} does not match header arithmetic {expected}")
    rec = np.dtype([("label", "<u4"), ("data", "<f4", (c, h, w))])
    arr = np.frombuffer(raw, dtype=rec, count=n, offset=_DS_HEADER.size)
    labels = arr["label"].astype(np.int64)
    if n and labels.max() >= k:
        raise FormatError(f"{path}: label {labels.max()} out of range for {k} classes")
    return arr["data"].astype(np.float32), labels, int(k)


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    digest: bytes
    step: int
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if len(ckpt.digest) != 32:
        raise ValueError("digest must be 32 raw bytes")
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    table = [struct.pack("<I", len(ckpt.tensors))]
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode()
        table.append(struct.pack("<H", len(key)) + key)
        table.append(struct.pack(f"<BB{data.ndim}IQ", _DTYPE_F32, data.ndim, *data.shape, offset))
        chunks.append(data.tobytes())
        offset += data.nbytes
    payload = b"".join(chunks)
    head = CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + ckpt.digest + struct.pack("<QI", ckpt.step, len(meta))
    tail = struct.pack("<Q", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))
    return head + meta + b"".join(table) + tail


class _Reader:
    def __init__(self, raw: bytes, name: str):
        self.raw, self.pos, self.name = raw, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.name}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))


def decode_checkpoint(raw: bytes, name: str = "checkpoint") -> Checkpoint:
    r = _Reader(raw, name)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{name}: bad magic")
    (version,) = r.unpack("I")
    if version != CKPT_VERSION:
        raise FormatError(f"{name}: unsupported checkpoint version {version}")
    digest = r.take(32)
    step, meta_len = r.unpack("QI")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{name}: corrupt metadata ({e})") from None
    (n,) = r.unpack("I")
    entries = []
    for _ in range(n):
        (klen,) = r.unpack("H")
        key = r.take(klen).decode()
        tag, rank = r.unpack("BB")
        if tag != _DTYPE_F32:
            raise FormatError(f"{name}: unknown dtype tag {tag} for {key!r}")
        shape = r.unpack(f"{rank}I") if rank else ()
        (offset,) = r.unpack("Q")
        entries.append((key, tuple(shape), offset))
    (plen,) = r.unpack("Q")
    payload = r.take(plen)
    (crc,) = r.unpack("I")
    if r.pos != len(raw):
        raise FormatError(f"{name}: {len(raw) - r.pos} trailing bytes")
    if zlib.crc32(payload) != crc:
        raise FormatError(f"{name}: payload checksum mismatch")
    tensors = {}
    for key, shape, offset in entries:
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 4 * count > plen:
            raise FormatError(f"{name}: entry {key!r} runs past the payload")
        tensors[key] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
    return Checkpoint(digest, step, meta, tensors)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path, expected_digest: bytes | None = None, force: bool = False) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes(), str(path))
    if expected_digest is not None and ckpt.digest != expected_digest and not force:
        raise DigestMismatch(
            f"{path}: config digest {ckpt.digest.hex()[:12]} does not match {expected_digest.hex()[:12]}"
        )
    return ckpt


# -- previews ----------------------------------------------------------------


def ppm_bytes(latent: np.ndarray) -> bytes:
    """Binary P6 image of a (C, H, W) latent.

    One channel is shown as gray, otherwise the first three channels map to
    RGB. Each channel is min-max scaled to 0..255 independently.
    """
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 3:
        raise ValueError(f"expected (C, H, W), got shape {latent.shape}")
    chans = latent[:3] if latent.shape[0] >= 3 else np.repeat(latent[:1], 3, axis=0)
    lo = chans.min(axis=(1, 2), keepdims=True)
    span = chans.max(axis=(1, 2), keepdims=True) - lo
    img = np.where(span > 0, (chans - lo) / np.where(span > 0, span, 1.0), 0.0)
    pix = np.round(img * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = pix.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + pix.tobytes()


def write_ppm(path, latent: np.ndarray) -> None:
    atomic_write(path, ppm_bytes(latent))
