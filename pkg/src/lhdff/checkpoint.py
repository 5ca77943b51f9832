"""Binary checkpoint container ("LHDF").

Layout (little-endian)::

    magic "LHDF" | version u16 | tensor count u32
    per tensor: name length u16 | name (utf-8) | rank u8 | extents u32 x rank | dtype u8 | payload
    footer: CRC32 (u32) of every preceding byte

dtype codes: 0 = f32, 1 = f64, 2 = i64, 3 = u8 (used for text metadata).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"LHDF"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


class CheckpointIntegrityError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(ValueError):
    pass


class VocabularyMismatchError(ValueError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float32 or arr.dtype == np.float64 or arr.dtype == np.int64 or arr.dtype == np.uint8:
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        else:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", _CODES[arr.dtype.str]))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


def read_tensors(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()

    def need(offset: int, n: int, what: str) -> None:
        if offset + n > len(blob) - 4:
            raise CheckpointIntegrityError(f"truncated while reading {what}", offset)

    if len(blob) < 10 + 4:
        raise CheckpointIntegrityError("file too short for header", len(blob))
    if blob[:4] != MAGIC:
        raise CheckpointIntegrityError(f"bad magic {blob[:4]!r}", 0)
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version} is not supported "
                                      f"(this build reads version {FORMAT_VERSION})")
    stored_crc = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointIntegrityError("CRC32 mismatch", len(blob) - 4)

    offset = 10
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(offset, 2, "name length")
        (n_name,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        need(offset, n_name + 1, "name")
        name = blob[offset:offset + n_name].decode("utf-8")
        offset += n_name
        rank = blob[offset]
        offset += 1
        need(offset, 4 * rank + 1, f"extents of {name}")
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        code = blob[offset]
        offset += 1
        if code not in _DTYPES:
            raise CheckpointIntegrityError(f"unknown dtype code {code} for {name}", offset - 1)
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        need(offset, nbytes, f"payload of {name}")
        out[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize,
                                  offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob) - 4:
        raise CheckpointIntegrityError("trailing bytes before footer", offset)
    return out


def _text(value: str) -> np.ndarray:
    return np.frombuffer(value.encode("utf-8"), dtype=np.uint8)


def _untext(arr: np.ndarray) -> str:
    return arr.tobytes().decode("utf-8")


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = -1  # last completed epoch, 0-based
    step: int = 0
    vocab_text: str = ""
    config: dict = field(default_factory=dict)
    best_loss: float = float("inf")
    version: int = FORMAT_VERSION

    @property
    def vocab_hash(self) -> str:
        return hashlib.sha256(self.vocab_text.encode("utf-8")).hexdigest()

    def model_state(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers}

    def check_vocab(self, vocab_hash: str) -> None:
        if vocab_hash != self.vocab_hash:
            raise VocabularyMismatchError("checkpoint vocabulary hash does not match the current vocabulary")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in ckpt.params.items():
        tensors["param." + name] = arr
    for name, arr in ckpt.buffers.items():
        tensors["buffer." + name] = arr
    for name, arr in ckpt.adam_m.items():
        tensors["adam.m." + name] = arr
    for name, arr in ckpt.adam_v.items():
        tensors["adam.v." + name] = arr
    tensors["meta.counters"] = np.array([ckpt.adam_t, ckpt.epoch, ckpt.step], dtype=np.int64)
    tensors["meta.best_loss"] = np.array([ckpt.best_loss], dtype=np.float64)
    tensors["meta.vocab"] = _text(ckpt.vocab_text)
    tensors["meta.vocab_hash"] = _text(ckpt.vocab_hash)
    tensors["meta.config"] = _text(json.dumps(ckpt.config, sort_keys=True))
    write_tensors(path, tensors)


def load_checkpoint(path, expect_vocab_hash: Optional[str] = None) -> Checkpoint:
    tensors = read_tensors(path)
    groups: dict[str, dict[str, np.ndarray]] = {"param.": {}, "buffer.": {}, "adam.m.": {}, "adam.v.": {}}
    for name, arr in tensors.items():
        for prefix, group in groups.items():
            if name.startswith(prefix):
                group[name[len(prefix):]] = arr
                break
    try:
        adam_t, epoch, step = (int(v) for v in tensors["meta.counters"])
        ckpt = Checkpoint(
            params=groups["param."], buffers=groups["buffer."],
            adam_m=groups["adam.m."], adam_v=groups["adam.v."],
            adam_t=adam_t, epoch=epoch, step=step,
            vocab_text=_untext(tensors["meta.vocab"]),
            config=json.loads(_untext(tensors["meta.config"])),
            best_loss=float(tensors["meta.best_loss"][0]),
        )
    except KeyError as exc:
        raise CheckpointIntegrityError(f"missing metadata entry {exc}", 0) from exc
    if _untext(tensors["meta.vocab_hash"]) != ckpt.vocab_hash:
        raise CheckpointIntegrityError("stored vocabulary hash does not match stored vocabulary", 0)
    if expect_vocab_hash is not None:
        ckpt.check_vocab(expect_vocab_hash)
    return ckpt
