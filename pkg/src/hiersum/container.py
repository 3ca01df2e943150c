"""Binary container shared by checkpoints and attention-trace files.

Layout (integers little-endian)::

    b"HSUMCKPT"            magic
    uint32                 format version
    uint32 + bytes         metadata text, UTF-8 "section.key=value" lines
    uint32 + bytes         tensor table, one "name<TAB>f32<TAB>d0,d1,..<TAB>offset" line each
    uint64 + bytes         float32 payload
    uint32                 CRC32 of every preceding byte

Tensors are stored as float32, so a save/load round trip is exact at that
precision.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"HSUMCKPT"
FORMAT_VERSION = 1


class ContainerError(RuntimeError):
    """Unreadable, truncated or corrupted container file."""


class ContainerWriteError(OSError):
    """The container could not be written to disk."""


def format_meta(sections: dict[str, dict]) -> str:
    lines = []
    for section, values in sections.items():
        for k, v in values.items():
            text = str(v)
            if "\n" in text:
                raise ContainerError(f"metadata value for {section}.{k} contains a newline")
            lines.append(f"{section}.{k}={text}")
    return "\n".join(lines) + "\n"


def parse_meta(text: str) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        section, _, name = key.partition(".")
        out.setdefault(section, {})[name] = value
    return out


def write_container(path, sections: dict[str, dict], tensors: Iterable[tuple[str, np.ndarray]]) -> None:
    meta = format_meta(sections).encode()
    payload = bytearray()
    table = []
    for name, arr in tensors:
        if not name or "\t" in name or "\n" in name:
            raise ContainerError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr)
        table.append(f"{name}\tf32\t{','.join(map(str, arr.shape))}\t{len(payload)}")
        payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    table_bytes = ("\n".join(table) + "\n").encode()

    blob = bytearray(MAGIC)
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<I", len(meta)) + meta
    blob += struct.pack("<I", len(table_bytes)) + table_bytes
    blob += struct.pack("<Q", len(payload)) + payload
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(bytes(blob))
        tmp.replace(path)
    except OSError as exc:
        raise ContainerWriteError(f"cannot write {path}: {exc}") from exc


def read_container(path) -> tuple[dict[str, dict[str, str]], dict[str, np.ndarray]]:
    """Return ``(metadata sections, {name: float64 array})``.

    Nothing is returned unless the whole file passes the integrity check.
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: not a container file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ContainerError(f"{path}: integrity check failed (truncated or corrupted)")

    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    pos += 4
    (n,) = struct.unpack_from("<I", body, pos)
    meta = body[pos + 4: pos + 4 + n].decode()
    pos += 4 + n
    (n,) = struct.unpack_from("<I", body, pos)
    table = body[pos + 4: pos + 4 + n].decode()
    pos += 4 + n
    (n,) = struct.unpack_from("<Q", body, pos)
    payload = body[pos + 8: pos + 8 + n]
    if len(payload) != n:
        raise ContainerError(f"{path}: payload truncated")

    tensors = {}
    for line in table.splitlines():
        if not line:
            continue
        name, dtype, shape_s, offset = line.split("\t")
        if dtype != "f32":
            raise ContainerError(f"{path}: unsupported dtype {dtype}")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=int(offset))
        tensors[name] = arr.reshape(shape).astype(np.float64)
    return parse_meta(meta), tensors
