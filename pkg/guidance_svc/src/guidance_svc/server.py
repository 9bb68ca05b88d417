"""TCP service answering guidance requests.

One frame in, one frame out, any number of frames per connection.
Malformed input gets an error frame and the connection stays open; the
reply to a well-formed request is a pure function of the request bytes
and the loaded weights, so identical requests produce identical replies.
"""

from __future__ import annotations

import socketserver

import numpy as np

from . import protocol
from .denoiser import DenoiserState, denoise
from .embedding import embed_conditions

REQUIRED_META = ("request_id", "width", "height", "strength", "t", "seed", "tensors")


class GuidanceService(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, state: DenoiserState, echo: bool = False):
        super().__init__(address, _Handler)
        self.state = state
        self.echo = echo


def _answer(service: GuidanceService, frame: protocol.Frame) -> bytes:
    meta = frame.meta
    missing = [k for k in REQUIRED_META if k not in meta]
    if missing:
        return protocol.encode_error(f"request metadata missing {', '.join(missing)}")
    absent = [k for k in protocol.REQUEST_MANIFEST if k not in frame.tensors]
    if absent:
        return protocol.encode_error(f"request tensors missing {', '.join(absent)}")
    request_id = meta["request_id"]
    try:
        t = int(meta["t"])
        seed = int(meta["seed"])
        float(meta["strength"])
    except ValueError as exc:
        return protocol.encode_error(f"bad request field: {exc}")

    if service.echo:
        # hand the rendered tensor straight back; float32 payload survives unchanged
        return protocol.encode_response(
            request_id, frame.tensors["rendered"], "guidance-svc-echo", t
        )

    cond = embed_conditions(
        service.state.encoders,
        text="street scene",
        ref_prev=frame.tensors["ref_prev"],
        ref_next=frame.tensors["ref_next"],
        depth_prev=frame.tensors["depth_prev"],
        depth_next=frame.tensors["depth_next"],
    )
    guidance = denoise(
        service.state,
        np.clip(frame.tensors["rendered"], 0.0, 1.0),
        cond,
        t=t,
        seed=seed,
        depth_target=frame.tensors["depth_target"],
    )
    return protocol.encode_response(request_id, guidance, "guidance-svc-denoise", t)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        while True:
            try:
                frame = protocol.read_frame(sock)
            except protocol.ConnectionClosed:
                return
            except protocol.FrameError as exc:
                try:
                    sock.sendall(protocol.encode_error(str(exc)))
                except OSError:
                    return
                continue
            except OSError:
                return
            if frame.kind == "error":
                # a client complaining at us needs no reply
                continue
            try:
                reply = _answer(self.server, frame)
            except Exception as exc:  # keep serving other requests
                reply = protocol.encode_error(f"internal error: {exc}")
            try:
                sock.sendall(reply)
            except OSError:
                return
