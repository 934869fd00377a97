"""VLCK checkpoint files.

Layout (little-endian)::

    b"VLCK" | u32 version | u32 len | config JSON (UTF-8, canonical)
    { u32 len | name (UTF-8) | EMBD tensor }*
    u64 step | u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import ParseError
from .numerics import read_embd, write_embd

MAGIC = b"VLCK"
VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def encode_checkpoint(config: dict, tensors: dict, step: int) -> bytes:
    buf = bytearray(MAGIC)
    blob = canonical_json(config).encode("utf-8")
    buf += struct.pack("<II", VERSION, len(blob)) + blob
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += write_embd(np.asarray(arr, dtype=np.float64))
    buf += struct.pack("<Q", step)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


def decode_checkpoint(buf: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]", int]:
    if len(buf) < 24 or buf[:4] != MAGIC:
        raise ParseError("bad VLCK magic at byte offset 0")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise ParseError(f"VLCK CRC mismatch at byte offset {len(buf) - 4}")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ParseError(f"unsupported VLCK version {version} at byte offset 4")
    pos = 12
    try:
        config = json.loads(buf[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"unreadable config blob at byte offset {pos}: {exc}") from None
    pos += n
    end = len(buf) - 12
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    while pos < end:
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + ln].decode("utf-8")
        pos += ln
        t, pos = read_embd(buf, pos, return_end=True)
        tensors[name] = t.data
    if pos != end:
        raise ParseError(f"tensor records overrun the step counter at byte offset {pos}")
    (step,) = struct.unpack_from("<Q", buf, end)
    return config, tensors, step


def save_checkpoint(path, config: dict, tensors: dict, step: int) -> bytes:
    data = encode_checkpoint(config, tensors, step)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return data


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def state_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
