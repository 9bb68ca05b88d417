"""Binary framing for talking to an out-of-process guidance service.

Frames are self-delimiting: a 4-byte magic, a little-endian u32 protocol
version, a u32 metadata byte length, the UTF-8 metadata block, then raw
tensor bytes whose total size follows from the metadata (width, height
and the tensor manifest). Images travel as planar RGB float32, row-major;
depth maps as a single plane with invalid pixels encoded as 0 (valid
depths are strictly positive, so 0 is unambiguous).

Request frames and response frames share the "SGDG" magic and differ only
in their manifest; a service reports failures with an "SGDE" frame whose
payload is a human-readable message.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ProtocolError

MAGIC_DATA = b"SGDG"
MAGIC_ERROR = b"SGDE"
PROTOCOL_VERSION = 1

REQUEST_TENSORS = ("rendered", "ref_prev", "ref_next", "depth_target", "depth_prev", "depth_next")
RESPONSE_TENSORS = ("guidance",)
_IMAGE_TENSORS = {"rendered", "ref_prev", "ref_next", "guidance"}

_HEADER = struct.Struct("<4sII")


def _tensor_bytes(name: str, width: int, height: int) -> int:
    planes = 3 if name in _IMAGE_TENSORS else 1
    return planes * width * height * 4


def _encode_image(img: np.ndarray) -> bytes:
    # (H, W, 3) -> planar RGB
    return np.ascontiguousarray(np.transpose(img, (2, 0, 1))).astype("<f4").tobytes()


def _decode_image(raw: bytes, width: int, height: int) -> np.ndarray:
    planes = np.frombuffer(raw, dtype="<f4").reshape(3, height, width)
    return np.transpose(planes, (1, 2, 0)).astype(np.float64)


def _encode_plane(plane: np.ndarray) -> bytes:
    return np.ascontiguousarray(plane).astype("<f4").tobytes()


def _decode_plane(raw: bytes, width: int, height: int) -> np.ndarray:
    return np.frombuffer(raw, dtype="<f4").reshape(height, width).astype(np.float64)


def _format_metadata(fields: dict) -> bytes:
    lines = [f"{key}={value}" for key, value in fields.items()]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_metadata(blob: bytes) -> dict:
    fields = {}
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"metadata is not valid UTF-8: {exc}") from exc
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise ProtocolError(f"metadata line without '=': {line!r}")
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    return fields


def _require(fields: dict, *keys):
    for key in keys:
        if key not in fields:
            raise ProtocolError(f"metadata missing required key {key!r}")


def _int_field(fields, key):
    try:
        return int(fields[key])
    except ValueError as exc:
        raise ProtocolError(f"metadata key {key!r} is not an integer: {fields[key]!r}") from exc


def encode_request(
    request_id: str,
    rendered: np.ndarray,
    ref_prev: np.ndarray,
    ref_next: np.ndarray,
    depth_target: np.ndarray,
    depth_prev: np.ndarray,
    depth_next: np.ndarray,
    strength: float,
    t: int,
    seed: int,
) -> bytes:
    """Build a request frame. Depth planes use 0 for invalid pixels."""
    height, width = rendered.shape[:2]
    meta = _format_metadata(
        {
            "request_id": request_id,
            "width": width,
            "height": height,
            "strength": repr(float(strength)),
            "t": int(t),
            "seed": int(seed),
            "tensors": ",".join(REQUEST_TENSORS),
        }
    )
    body = b"".join(
        [
            _encode_image(rendered),
            _encode_image(ref_prev),
            _encode_image(ref_next),
            _encode_plane(depth_target),
            _encode_plane(depth_prev),
            _encode_plane(depth_next),
        ]
    )
    return _HEADER.pack(MAGIC_DATA, PROTOCOL_VERSION, len(meta)) + meta + body


def encode_response(request_id: str, guidance: np.ndarray, provider_id: str, t: int) -> bytes:
    height, width = guidance.shape[:2]
    meta = _format_metadata(
        {
            "request_id": request_id,
            "width": width,
            "height": height,
            "provider_id": provider_id,
            "t": int(t),
            "tensors": ",".join(RESPONSE_TENSORS),
        }
    )
    return _HEADER.pack(MAGIC_DATA, PROTOCOL_VERSION, len(meta)) + meta + _encode_image(guidance)


def encode_error(message: str) -> bytes:
    payload = message.encode("utf-8")
    return _HEADER.pack(MAGIC_ERROR, PROTOCOL_VERSION, len(payload)) + payload


def split_frame(buf: bytes):
    """Parse one complete frame from bytes: (kind, metadata, tensors).

    kind is "data" or "error"; for "error" the metadata is {"message": ...}
    and tensors is empty.
    """
    if len(buf) < _HEADER.size:
        raise ProtocolError(f"frame truncated: {len(buf)} bytes is shorter than the header")
    magic, version, meta_len = _HEADER.unpack_from(buf)
    if magic == MAGIC_ERROR:
        payload = buf[_HEADER.size : _HEADER.size + meta_len]
        if len(payload) < meta_len:
            raise ProtocolError("error frame truncated")
        return "error", {"message": payload.decode("utf-8", "replace")}, {}
    if magic != MAGIC_DATA:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    meta_end = _HEADER.size + meta_len
    if len(buf) < meta_end:
        raise ProtocolError("metadata truncated")
    fields = _parse_metadata(buf[_HEADER.size : meta_end])
    _require(fields, "width", "height", "tensors")
    width = _int_field(fields, "width")
    height = _int_field(fields, "height")
    if width <= 0 or height <= 0:
        raise ProtocolError(f"invalid tensor dimensions {width}x{height}")
    names = [n for n in fields["tensors"].split(",") if n]
    tensors = {}
    offset = meta_end
    for name in names:
        size = _tensor_bytes(name, width, height)
        chunk = buf[offset : offset + size]
        if len(chunk) < size:
            raise ProtocolError(f"tensor {name!r} truncated: wanted {size} bytes, got {len(chunk)}")
        if name in _IMAGE_TENSORS:
            tensors[name] = _decode_image(chunk, width, height)
        else:
            tensors[name] = _decode_plane(chunk, width, height)
        offset += size
    if offset != len(buf):
        raise ProtocolError(f"frame has {len(buf) - offset} trailing bytes")
    return "data", fields, tensors


def recv_exact(sock, n: int) -> bytes:
    """Read exactly n bytes from a socket or raise ProtocolError on EOF."""
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = sock.recv(min(remaining, 1 << 16))
        if not chunk:
            raise ProtocolError(f"connection closed with {remaining} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock):
    """Read one complete frame from a socket; returns split_frame output."""
    header = recv_exact(sock, _HEADER.size)
    magic, version, meta_len = _HEADER.unpack(header)
    if magic == MAGIC_ERROR:
        payload = recv_exact(sock, meta_len)
        return split_frame(header + payload)
    if magic != MAGIC_DATA:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    meta_blob = recv_exact(sock, meta_len)
    fields = _parse_metadata(meta_blob)
    _require(fields, "width", "height", "tensors")
    width = _int_field(fields, "width")
    height = _int_field(fields, "height")
    if width <= 0 or height <= 0 or width * height > 64_000_000:
        raise ProtocolError(f"invalid tensor dimensions {width}x{height}")
    names = [n for n in fields["tensors"].split(",") if n]
    body = b"".join(recv_exact(sock, _tensor_bytes(name, width, height)) for name in names)
    return split_frame(header + meta_blob + body)
