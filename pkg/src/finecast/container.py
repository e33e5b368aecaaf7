"""Single-file binary container: magic, length-prefixed JSON header, raw payload.

Layout: 8 magic bytes, uint64 little-endian header length, UTF-8 JSON
header, payload bytes. Writers go through a temp file and rename so
partially written artifacts never replace complete ones.
"""

from __future__ import annotations

import json
import os
import struct

from .errors import FormatError

_LEN = struct.Struct("<Q")


def write_container(path: str, magic: bytes, header: dict, payload: bytes) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        fh.write(payload)
    os.replace(tmp, path)


def read_container(path: str, magic: bytes) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        got = fh.read(8)
        if got != magic:
            raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
        (hlen,) = _LEN.unpack(fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable header: {exc}") from exc
        payload = fh.read()
    return header, payload
