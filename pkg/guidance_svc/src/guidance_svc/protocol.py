"""Frame codec for the guidance socket protocol.

A frame is: 4-byte magic, little-endian u32 version, u32 payload byte
count, then the payload. For data frames ("SGDG") the payload is a UTF-8
metadata block (key=value lines) whose declared length is the u32, then
the tensors named by the metadata's ``tensors`` manifest as raw
little-endian float32, images planar RGB row-major, depth maps a single
plane with 0 marking invalid pixels. Error frames ("SGDE") carry a
human-readable message as their payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DATA_MAGIC = b"SGDG"
ERROR_MAGIC = b"SGDE"
VERSION = 1

HEADER = struct.Struct("<4sII")

# manifest order is fixed by the protocol
REQUEST_MANIFEST = ("rendered", "ref_prev", "ref_next", "depth_target", "depth_prev", "depth_next")
RESPONSE_MANIFEST = ("guidance",)
_THREE_PLANE = frozenset({"rendered", "ref_prev", "ref_next", "guidance"})

MAX_PIXELS = 64_000_000


class FrameError(Exception):
    """Malformed or truncated protocol frame."""


class ConnectionClosed(FrameError):
    """Peer closed the connection at a frame boundary."""


@dataclass
class Frame:
    kind: str  # "data" or "error"
    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)

    @property
    def message(self) -> str:
        return self.meta.get("message", "")


def _planes(name: str) -> int:
    return 3 if name in _THREE_PLANE else 1


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    a = np.asarray(arr)
    if _planes(name) == 3:
        a = np.transpose(a, (2, 0, 1))
    return np.ascontiguousarray(a).astype("<f4").tobytes()


def _unpack_tensor(name: str, raw: bytes, width: int, height: int) -> np.ndarray:
    flat = np.frombuffer(raw, dtype="<f4")
    if _planes(name) == 3:
        return np.transpose(flat.reshape(3, height, width), (1, 2, 0)).astype(np.float64)
    return flat.reshape(height, width).astype(np.float64)


def _meta_block(fields: dict) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in fields.items()).encode("utf-8")


def _parse_meta(blob: bytes) -> dict:
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FrameError(f"metadata is not UTF-8: {exc}") from exc
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FrameError(f"metadata line without '=': {line!r}")
        out[key.strip()] = value.strip()
    return out


def _dims(meta: dict) -> tuple[int, int]:
    for key in ("width", "height", "tensors"):
        if key not in meta:
            raise FrameError(f"metadata missing {key!r}")
    try:
        width, height = int(meta["width"]), int(meta["height"])
    except ValueError as exc:
        raise FrameError(f"non-integer frame dimensions: {exc}") from exc
    if width <= 0 or height <= 0 or width * height > MAX_PIXELS:
        raise FrameError(f"invalid frame dimensions {width}x{height}")
    return width, height


def encode_request(
    request_id: str,
    tensors: dict,
    strength: float,
    t: int,
    seed: int,
) -> bytes:
    sample = tensors[REQUEST_MANIFEST[0]]
    height, width = np.asarray(sample).shape[:2]
    meta = _meta_block(
        {
            "request_id": request_id,
            "width": width,
            "height": height,
            "strength": repr(float(strength)),
            "t": int(t),
            "seed": int(seed),
            "tensors": ",".join(REQUEST_MANIFEST),
        }
    )
    body = b"".join(_pack_tensor(n, tensors[n]) for n in REQUEST_MANIFEST)
    return HEADER.pack(DATA_MAGIC, VERSION, len(meta)) + meta + body


def encode_response(request_id: str, guidance: np.ndarray, provider_id: str, t: int) -> bytes:
    height, width = np.asarray(guidance).shape[:2]
    meta = _meta_block(
        {
            "request_id": request_id,
            "width": width,
            "height": height,
            "provider_id": provider_id,
            "t": int(t),
            "tensors": ",".join(RESPONSE_MANIFEST),
        }
    )
    return HEADER.pack(DATA_MAGIC, VERSION, len(meta)) + meta + _pack_tensor("guidance", guidance)


def encode_error(message: str) -> bytes:
    payload = message.encode("utf-8")
    return HEADER.pack(ERROR_MAGIC, VERSION, len(payload)) + payload


def decode_frame(buf: bytes) -> Frame:
    """Parse one complete frame held in memory."""
    if len(buf) < HEADER.size:
        raise FrameError("buffer shorter than frame header")
    magic, version, length = HEADER.unpack_from(buf)
    if magic == ERROR_MAGIC:
        payload = buf[HEADER.size : HEADER.size + length]
        if len(payload) < length:
            raise FrameError("error frame truncated")
        return Frame("error", {"message": payload.decode("utf-8", "replace")})
    if magic != DATA_MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    meta_end = HEADER.size + length
    if len(buf) < meta_end:
        raise FrameError("metadata truncated")
    meta = _parse_meta(buf[HEADER.size : meta_end])
    width, height = _dims(meta)
    tensors = {}
    offset = meta_end
    for name in [n for n in meta["tensors"].split(",") if n]:
        size = 4 * _planes(name) * width * height
        chunk = buf[offset : offset + size]
        if len(chunk) < size:
            raise FrameError(f"tensor {name!r} truncated")
        tensors[name] = _unpack_tensor(name, chunk, width, height)
        offset += size
    if offset != len(buf):
        raise FrameError(f"{len(buf) - offset} trailing bytes after tensors")
    return Frame("data", meta, tensors)


def _read_exact(sock, n: int) -> bytes:
    parts = []
    left = n
    while left:
        chunk = sock.recv(min(left, 1 << 16))
        if not chunk:
            raise FrameError(f"peer closed mid-frame ({left} bytes missing)")
        parts.append(chunk)
        left -= len(chunk)
    return b"".join(parts)


def read_frame(sock) -> Frame:
    """Read one frame from a socket.

    Raises ConnectionClosed on a clean EOF before any header byte and
    FrameError on anything malformed.
    """
    first = sock.recv(1)
    if not first:
        raise ConnectionClosed("peer closed the connection")
    header = first + _read_exact(sock, HEADER.size - 1)
    magic, version, length = HEADER.unpack(header)
    if magic == ERROR_MAGIC:
        return decode_frame(header + _read_exact(sock, length))
    if magic != DATA_MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    meta_blob = _read_exact(sock, length)
    meta = _parse_meta(meta_blob)
    width, height = _dims(meta)
    names = [n for n in meta["tensors"].split(",") if n]
    body = b"".join(_read_exact(sock, 4 * _planes(n) * width * height) for n in names)
    return decode_frame(header + meta_blob + body)
