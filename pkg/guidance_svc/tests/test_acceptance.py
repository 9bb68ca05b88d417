"""End-to-end behavioral guarantees for the guidance service package."""

import shutil
import socket
import subprocess

import numpy as np
import pytest

from guidance_svc import protocol
from guidance_svc.denoiser import init_state, stage2_grads
from guidance_svc.embedding import EncoderBank, embed_conditions, fuse_tokens


def test_concatenated_length_is_text_plus_two_references():
    rng = np.random.default_rng(0)
    for l_t, l_i in ((77, 49), (11, 16), (1, 4)):
        enc = EncoderBank(l_t=l_t, l_i=l_i, d=8, seed=1)
        prev, nxt = rng.random((8, 10, 3)), rng.random((8, 10, 3))
        cond = embed_conditions(enc, "street", prev, nxt)
        assert cond.concatenated.shape == (l_t + 2 * l_i, 8)
    assert 77 + 2 * 49 == 175


def test_fusion_idempotent_and_commutative():
    rng = np.random.default_rng(1)
    tokens = rng.random((12, 6))
    assert np.array_equal(fuse_tokens(tokens, tokens), tokens)
    other = rng.random((12, 6))
    assert np.array_equal(fuse_tokens(tokens, other), fuse_tokens(other, tokens))


def test_condition_dropout_rate():
    enc = EncoderBank(l_t=1, l_i=1, d=2, seed=2)
    rng = np.random.default_rng(3)
    img = rng.random((2, 2, 3))
    draws = 100_000
    dropped = 0
    for _ in range(draws):
        cond = embed_conditions(enc, "", img, img, dropout_p=0.1, rng=rng)
        dropped += int(np.all(cond.concatenated == 0.0))
    rate = dropped / draws
    assert abs(rate - 0.1) <= 0.005


def test_stage2_freeze_and_copy_contracts():
    state = init_state(seed=4, n_features=4, l_t=5, l_i=4, d=8)
    state.start_stage2()
    rng = np.random.default_rng(5)

    # the control branch is a bit-exact clone of the trunk's encoder half
    z = rng.standard_normal((3, 5, 5))
    c = rng.standard_normal(8)
    assert state.enc.features(z, 4, c).tobytes() == state.control.features(z, 4, c).tobytes()

    # the frozen stack receives exact-zero gradients from the stage-2 objective
    state.gate_w[:] = rng.normal(0.0, 0.3, state.gate_w.shape)
    batch = [
        {
            "image": rng.random((16, 16, 3)),
            "cond": embed_conditions(
                state.encoders, "x", rng.random((16, 16, 3)), rng.random((16, 16, 3))
            ),
            "t": 5,
            "noise_seed": 7,
            "depth_target": rng.random((16, 16)) * 5,
        }
    ]
    grads = stage2_grads(state, batch)
    for g in grads["enc"].values():
        assert np.all(g == 0.0)
    assert np.all(grads["dec_w"] == 0.0)
    assert np.all(grads["dec_b"] == 0.0)
    assert np.any(grads["control"]["conv_w"] != 0.0)


def test_echo_round_trip_is_byte_exact(echo_service, probe_images):
    request = protocol.encode_request("acc-echo", probe_images, 0.5, 5, 3)
    meta_len = protocol.HEADER.unpack_from(request)[2]
    h, w = probe_images["rendered"].shape[:2]
    sent_payload = request[
        protocol.HEADER.size + meta_len : protocol.HEADER.size + meta_len + 12 * h * w
    ]
    with socket.create_connection(echo_service, timeout=10) as sock:
        sock.settimeout(10)
        sock.sendall(request)
        reply = protocol.read_frame(sock)
    assert reply.kind == "data"
    echoed = np.ascontiguousarray(
        np.transpose(reply.tensors["guidance"], (2, 0, 1))
    ).astype("<f4").tobytes()
    assert echoed == sent_payload


def test_malformed_frame_answered_in_place(echo_service, probe_images):
    with socket.create_connection(echo_service, timeout=10) as sock:
        sock.settimeout(10)
        sock.sendall(protocol.HEADER.pack(b"JUNK", 1, 0))
        assert protocol.read_frame(sock).kind == "error"
        # same connection keeps working
        sock.sendall(protocol.encode_request("still-alive", probe_images, 0.5, 5, 3))
        reply = protocol.read_frame(sock)
        assert reply.kind == "data"
        assert reply.meta["request_id"] == "still-alive"


def test_primary_probe_command_passes(denoise_service):
    exe = shutil.which("streetsplat")
    if exe is None:
        pytest.fail("streetsplat console script is not installed")
    host, port = denoise_service
    proc = subprocess.run(
        [exe, "guidance-probe", "--address", f"{host}:{port}"],
        capture_output=True,
        text=True,
        timeout=120,
    )
    assert proc.returncode == 0, proc.stderr
    assert "probe ok" in proc.stdout
