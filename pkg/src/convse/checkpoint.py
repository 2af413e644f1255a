"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CVSE" | u32 version | u32 len | UTF-8 JSON config (len bytes)
    repeated: u16 name_len | name | u64 rows | u64 cols | rows*cols float64
    u32 CRC-32 of every preceding byte

The JSON record holds the network config under ``"network"`` and free-form
training metadata under ``"meta"``. Biases are stored as 1 x out_dim.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, TruncatedFileError, VersionError
from .model import EmbeddingNetwork, NetworkConfig, zeros_network

MAGIC = b"CVSE"
VERSION = 1


def encode_checkpoint(net: EmbeddingNetwork, meta: dict | None = None, version: int = VERSION) -> bytes:
    record = json.dumps({"network": net.config.to_dict(), "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", version, len(record)), record]
    for name, arr in net.params().items():
        mat = np.ascontiguousarray(arr.reshape(1, -1) if arr.ndim == 1 else arr, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<QQ", *mat.shape))
        parts.append(mat.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(net: EmbeddingNetwork, path, meta: dict | None = None) -> Path:
    path = Path(path)
    data = encode_checkpoint(net, meta)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedFileError(f"unexpected end of data at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> tuple[EmbeddingNetwork, dict]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if len(data) < 16:
        raise TruncatedFileError("checkpoint header is incomplete")
    reader = _Reader(data, len(data) - 4)
    reader.take(4)
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise VersionError(version, VERSION)
    (rec_len,) = reader.unpack("<I")
    try:
        record = json.loads(reader.take(rec_len).decode("utf-8"))
        config = NetworkConfig.from_dict(record["network"])
    except TruncatedFileError:
        raise
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable config record: {exc}") from exc

    tensors = {}
    while reader.pos < reader.end:
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8", errors="replace")
        rows, cols = reader.unpack("<QQ")
        if rows * cols * 8 > reader.end - reader.pos:
            raise TruncatedFileError(f"tensor {name!r} declares {rows}x{cols} values beyond end of file")
        tensors[name] = np.frombuffer(reader.take(rows * cols * 8), dtype="<f8").reshape(rows, cols)

    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ChecksumError("checkpoint CRC-32 mismatch")

    net = zeros_network(config)
    params = net.params()
    missing = set(params) - set(tensors)
    if missing:
        raise TruncatedFileError(f"checkpoint is missing tensors: {sorted(missing)}")
    loaded = {}
    for name, ref in params.items():
        arr = tensors[name].astype(np.float64)
        loaded[name] = arr.reshape(ref.shape) if ref.ndim == 1 else arr
        if loaded[name].shape != ref.shape:
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, config implies {ref.shape}")
    net.set_params(loaded)
    return net, record.get("meta", {})


def read_checkpoint(path) -> tuple[EmbeddingNetwork, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path) -> EmbeddingNetwork:
    return read_checkpoint(path)[0]
