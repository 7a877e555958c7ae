import json
import socket
import struct

import numpy as np
import pytest

from simstex_bridge.server import EchoBackend, serve_background
from simstex_bridge.wire import (encode_frame, payload_from_tensors,
                                 read_frame, tensors_from_payload)


@pytest.fixture(scope="module")
def server():
    srv = serve_background()
    yield srv
    srv.shutdown()


def roundtrip(server, header, payload=b""):
    with socket.create_connection(("127.0.0.1", server.port), timeout=10) as s:
        s.sendall(encode_frame(header, payload))
        return read_frame(s)


class TestInfo:
    def test_echo_capabilities(self, server):
        header, _ = roundtrip(server, {"op": "info"})
        assert header["ok"] is True
        info = header["info"]
        assert info["model"] == "echo"
        assert info["channels"] == 4
        assert info["downscale"] == 8


class TestDenoise:
    def test_echo_returns_latents_bit_exact(self, server):
        rng = np.random.default_rng(0)
        lat = rng.standard_normal((4, 64, 64)).astype(np.float32)
        depth = rng.uniform(0, 1, (1, 64, 64)).astype(np.float32)
        header = {"op": "denoise",
                  "shapes": {"latents": [4, 64, 64], "depth": [1, 64, 64]},
                  "t": 500, "prompt": "a test", "w_joint": 5.0, "w_text": 0.0}
        resp, payload = roundtrip(server, header,
                                  payload_from_tensors(lat, depth))
        assert resp["ok"] is True
        out = tensors_from_payload({"shapes": {"r": resp["shapes"]["result"]}},
                                   payload)["r"]
        assert out.tobytes() == lat.tobytes()

    def test_zero_latents_finite_same_shape(self, server):
        lat = np.zeros((4, 64, 64), np.float32)
        depth = np.zeros((1, 64, 64), np.float32)
        header = {"op": "denoise",
                  "shapes": {"latents": [4, 64, 64], "depth": [1, 64, 64]},
                  "t": 999}
        resp, payload = roundtrip(server, header,
                                  payload_from_tensors(lat, depth))
        assert resp["ok"] is True
        assert resp["shapes"]["result"] == [4, 64, 64]
        out = np.frombuffer(payload, "<f4")
        assert np.isfinite(out).all()

    def test_determinism(self, server):
        rng = np.random.default_rng(1)
        lat = rng.standard_normal((4, 64, 64)).astype(np.float32)
        depth = rng.uniform(0, 1, (1, 64, 64)).astype(np.float32)
        header = {"op": "denoise",
                  "shapes": {"latents": [4, 64, 64], "depth": [1, 64, 64]},
                  "t": 400}
        _, p1 = roundtrip(server, header, payload_from_tensors(lat, depth))
        _, p2 = roundtrip(server, header, payload_from_tensors(lat, depth))
        assert p1 == p2

    def test_bad_t_rejected(self, server):
        lat = np.zeros((4, 64, 64), np.float32)
        depth = np.zeros((1, 64, 64), np.float32)
        header = {"op": "denoise",
                  "shapes": {"latents": [4, 64, 64], "depth": [1, 64, 64]},
                  "t": 1500}
        resp, _ = roundtrip(server, header, payload_from_tensors(lat, depth))
        assert resp["ok"] is False and "t must" in resp["error"]

    def test_bad_shape_rejected(self, server):
        lat = np.zeros((4, 32, 32), np.float32)
        depth = np.zeros((1, 32, 32), np.float32)
        header = {"op": "denoise",
                  "shapes": {"latents": [4, 32, 32], "depth": [1, 32, 32]},
                  "t": 500}
        resp, _ = roundtrip(server, header, payload_from_tensors(lat, depth))
        assert resp["ok"] is False and "latents must be" in resp["error"]


class TestDecode:
    def test_echo_decode_upsamples_first_three_channels(self, server):
        rng = np.random.default_rng(2)
        lat = rng.uniform(0, 1, (4, 64, 64)).astype(np.float32)
        header = {"op": "decode", "shapes": {"latents": [4, 64, 64]}}
        resp, payload = roundtrip(server, header, payload_from_tensors(lat))
        assert resp["ok"] is True
        assert resp["shapes"]["result"] == [3, 512, 512]
        out = np.frombuffer(payload, "<f4").reshape(3, 512, 512)
        expect = np.repeat(np.repeat(lat[:3], 8, axis=1), 8, axis=2)
        assert np.array_equal(out, np.clip(expect, 0, 1))

    def test_output_in_unit_range(self, server):
        rng = np.random.default_rng(3)
        lat = rng.standard_normal((4, 64, 64)).astype(np.float32) * 3
        header = {"op": "decode", "shapes": {"latents": [4, 64, 64]}}
        _, payload = roundtrip(server, header, payload_from_tensors(lat))
        out = np.frombuffer(payload, "<f4")
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic(self, server):
        rng = np.random.default_rng(4)
        lat = rng.standard_normal((4, 64, 64)).astype(np.float32)
        header = {"op": "decode", "shapes": {"latents": [4, 64, 64]}}
        _, a = roundtrip(server, header, payload_from_tensors(lat))
        _, b = roundtrip(server, header, payload_from_tensors(lat))
        assert a == b


class TestProtocolRobustness:
    def test_malformed_header_keeps_connection_open(self, server):
        with socket.create_connection(("127.0.0.1", server.port),
                                      timeout=10) as s:
            bad = b"{this is not json"
            s.sendall(struct.pack("<II", 4 + len(bad), len(bad)) + bad)
            resp, _ = read_frame(s)
            assert resp["ok"] is False
            # the same connection still serves a valid request
            s.sendall(encode_frame({"op": "info"}))
            resp, _ = read_frame(s)
            assert resp["ok"] is True

    def test_unknown_op_keeps_connection_open(self, server):
        with socket.create_connection(("127.0.0.1", server.port),
                                      timeout=10) as s:
            s.sendall(encode_frame({"op": "transmogrify"}))
            resp, _ = read_frame(s)
            assert resp["ok"] is False
            s.sendall(encode_frame({"op": "info"}))
            resp, _ = read_frame(s)
            assert resp["ok"] is True

    def test_echo_op_round_trips_payload(self, server):
        payload = bytes(range(256)) * 4
        resp, back = roundtrip(server, {"op": "echo",
                                        "shapes": {"x": [256]}}, payload)
        assert resp["ok"] is True
        assert back == payload

    def test_shape_payload_mismatch_rejected(self, server):
        header = {"op": "denoise",
                  "shapes": {"latents": [4, 64, 64], "depth": [1, 64, 64]},
                  "t": 100}
        resp, _ = roundtrip(server, header, b"\x00" * 100)
        assert resp["ok"] is False


class TestPrimaryClientInterop:
    """The engine's remote denoiser speaks to the bridge over the real wire."""

    def test_remote_denoiser_roundtrip(self, server):
        simstex = pytest.importorskip("simstex")
        from simstex.denoiser import DenoiseRequest, RemoteDenoiser
        from simstex.diffusion import GuidanceConfig

        client = RemoteDenoiser(f"127.0.0.1:{server.port}")
        rng = np.random.default_rng(5)
        lat = rng.standard_normal((64, 64, 4)).astype(np.float32)
        req = DenoiseRequest(latents=lat, t=500,
                             depth=np.zeros((64, 64), np.float32),
                             prompt="anything", view_suffix="front view",
                             guidance=GuidanceConfig(5.0, 0.0))
        out = client.predict_epsilon(req)
        assert np.array_equal(out, lat)
        assert client.info()["model"] == "echo"

        decoded = client.decode(lat)
        assert decoded.shape == (512, 512, 3)
        client.close()


class TestFullPipelineOverEchoMode:
    def test_engine_pipeline_end_to_end_without_weights(self, server, tmp_path):
        simstex = pytest.importorskip("simstex")
        from simstex.denoiser import RemoteDenoiser
        from simstex.diffusion import make_schedule
        from simstex.fixtures import cube
        from simstex.geometry import CameraPreset
        from simstex.sims import SimsConfig, texture_pipeline

        sched = make_schedule(S=4)
        cfg = SimsConfig(seed=6, steps=4)
        client = RemoteDenoiser(f"127.0.0.1:{server.port}")
        result = texture_pipeline(cube(), "an echo-mode test",
                                    CameraPreset("default9"), sched, client,
                                    cfg, rounds=2)
        assert result.round2 is not None
        assert len(result.xhat0_views) == 9
        assert np.isfinite(result.z0).all()
        decoded = client.decode(result.xhat0_views[0])
        assert decoded.shape == (512, 512, 3)
        client.close()
