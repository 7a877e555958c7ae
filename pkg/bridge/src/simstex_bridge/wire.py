"""Framed wire protocol.

Frame layout, everything little-endian:

    u32 total_len      length of the remainder of the frame
    u32 header_len     length of the UTF-8 JSON header
    header bytes       {"op": ..., "shapes": {...}, ...}
    payload bytes      float32 tensors, C-H-W order, concatenated in the
                       order their entries appear in header["shapes"]

A response carries {"ok": true, ...} or {"ok": false, "error": "..."}.
The declared shapes must multiply to the payload length; that is the only
structural invariant a parser needs to verify a frame.
"""

from __future__ import annotations

import json
import struct
from typing import Optional, Tuple

import numpy as np

MAX_FRAME = 1 << 28


class ProtocolError(Exception):
    """Frame violates the wire format (stream remains in sync)."""


class FrameSyncError(ProtocolError):
    """Frame length is corrupt; the byte stream cannot be trusted anymore."""


def encode_frame(header: dict, payload: bytes = b"") -> bytes:
    head = json.dumps(header).encode("utf-8")
    total = 4 + len(head) + len(payload)
    if total > MAX_FRAME:
        raise ProtocolError(f"frame of {total} bytes exceeds limit")
    return struct.pack("<II", total, len(head)) + head + payload


def parse_frame(data: bytes) -> Tuple[dict, bytes, int]:
    """Parse one frame from a byte buffer.

    Returns (header, payload, bytes consumed).  Raises ProtocolError on a
    malformed frame, IndexError-free: short buffers raise NeedMoreData.
    """
    if len(data) < 4:
        raise NeedMoreData(4 - len(data))
    (total,) = struct.unpack_from("<I", data, 0)
    if total < 4 or total > MAX_FRAME:
        raise FrameSyncError(f"bad frame length {total}")
    if len(data) < 4 + total:
        raise NeedMoreData(4 + total - len(data))
    (hlen,) = struct.unpack_from("<I", data, 4)
    if hlen > total - 4:
        raise ProtocolError("header length exceeds frame")
    try:
        header = json.loads(bytes(data[8:8 + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"unparseable header: {exc}") from exc
    if not isinstance(header, dict):
        raise ProtocolError("header must be a JSON object")
    payload = bytes(data[8 + hlen:4 + total])
    return header, payload, 4 + total


class NeedMoreData(Exception):
    def __init__(self, missing: int):
        super().__init__(f"need {missing} more bytes")
        self.missing = missing


def read_frame(sock) -> Optional[Tuple[dict, bytes]]:
    """Read one frame from a socket; None on clean EOF at a frame boundary.

    Length corruption raises FrameSyncError (the stream is lost); header
    problems raise plain ProtocolError (the next frame can still be read).
    """
    head = _read_exact(sock, 4, allow_eof=True)
    if head is None:
        return None
    (total,) = struct.unpack("<I", head)
    if total < 4 or total > MAX_FRAME:
        raise FrameSyncError(f"bad frame length {total}")
    body = _read_exact(sock, total)
    header, payload, _ = parse_frame(head + body)
    return header, payload


def _read_exact(sock, n: int, allow_eof: bool = False):
    chunks = []
    got = 0
    while got < n:
        part = sock.recv(n - got)
        if not part:
            if allow_eof and got == 0:
                return None
            raise FrameSyncError("connection closed mid-frame")
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def tensors_from_payload(header: dict, payload: bytes) -> dict:
    """Split a payload into named C-H-W float32 arrays per header shapes."""
    shapes = header.get("shapes", {})
    if not isinstance(shapes, dict):
        raise ProtocolError("shapes must be an object")
    out = {}
    offset = 0
    for name, shape in shapes.items():
        if (not isinstance(shape, list) or not shape
                or not all(isinstance(s, int) and s > 0 for s in shape)):
            raise ProtocolError(f"bad shape for {name!r}: {shape!r}")
        n = int(np.prod(shape)) * 4
        if offset + n > len(payload):
            raise ProtocolError("declared shapes exceed payload length")
        out[name] = np.frombuffer(payload[offset:offset + n],
                                  dtype="<f4").reshape(shape)
        offset += n
    if offset != len(payload):
        raise ProtocolError("payload longer than declared shapes")
    return out


def payload_from_tensors(*arrays: np.ndarray) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                    for a in arrays)
