import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simstex_bridge.wire import (NeedMoreData, ProtocolError, encode_frame,
                                 parse_frame, payload_from_tensors,
                                 tensors_from_payload)


class TestFraming:
    def test_roundtrip_simple(self):
        header = {"op": "info"}
        h, p, used = parse_frame(encode_frame(header))
        assert h == header and p == b""

    def test_roundtrip_with_payload(self):
        payload = bytes(range(256))
        data = encode_frame({"op": "echo", "n": 1}, payload)
        h, p, used = parse_frame(data)
        assert p == payload and used == len(data)

    def test_short_buffer_asks_for_more(self):
        data = encode_frame({"op": "info"})
        with pytest.raises(NeedMoreData):
            parse_frame(data[:2])
        with pytest.raises(NeedMoreData):
            parse_frame(data[:-1])

    def test_bad_length_rejected(self):
        with pytest.raises(ProtocolError):
            parse_frame(struct.pack("<I", 0) + b"xxxx")
        with pytest.raises(ProtocolError):
            parse_frame(struct.pack("<I", 1 << 30) + b"xxxx")

    def test_bad_json_rejected(self):
        head = b"not json"
        data = struct.pack("<II", 4 + len(head), len(head)) + head
        with pytest.raises(ProtocolError):
            parse_frame(data)

    def test_header_len_overrun_rejected(self):
        data = struct.pack("<II", 8, 100) + b"abcd"
        with pytest.raises(ProtocolError):
            parse_frame(data)

    def test_fuzz_roundtrip_10k_messages(self):
        # serialize -> parse is the identity for well-formed random messages
        rng = np.random.default_rng(2001)
        failures = 0
        stream = bytearray()
        messages = []
        for _ in range(10_000):
            header = {
                "op": str(rng.choice(["info", "denoise", "decode", "echo"])),
                "t": int(rng.integers(0, 1000)),
                "prompt": "".join(chr(int(c)) for c in
                                  rng.integers(32, 0x2FA0, size=rng.integers(0, 12))),
                "w_joint": float(rng.normal()),
                "nested": {"a": [1, 2, 3], "b": None},
            }
            payload = rng.bytes(int(rng.integers(0, 512)))
            messages.append((header, payload))
            stream += encode_frame(header, payload)
        offset = 0
        view = memoryview(bytes(stream))
        for header, payload in messages:
            try:
                h, p, used = parse_frame(view[offset:])
            except (ProtocolError, NeedMoreData):
                failures += 1
                break
            if h != header or p != payload:
                failures += 1
            offset += used
        assert failures == 0
        assert offset == len(stream)

    @given(st.dictionaries(st.text(max_size=8),
                           st.one_of(st.integers(), st.floats(allow_nan=False),
                                     st.text(max_size=16)),
                           max_size=5),
           st.binary(max_size=200))
    @settings(max_examples=100, deadline=None)
    def test_property_roundtrip(self, header, payload):
        h, p, _ = parse_frame(encode_frame(header, payload))
        assert h == header and p == payload


class TestTensorBlocks:
    def test_named_split(self):
        a = np.arange(24, dtype=np.float32).reshape(4, 2, 3)
        b = np.ones((1, 2, 2), np.float32)
        header = {"shapes": {"a": [4, 2, 3], "b": [1, 2, 2]}}
        out = tensors_from_payload(header, payload_from_tensors(a, b))
        assert np.array_equal(out["a"], a)
        assert np.array_equal(out["b"], b)

    def test_shapes_must_match_payload(self):
        header = {"shapes": {"a": [2, 2, 2]}}
        with pytest.raises(ProtocolError):
            tensors_from_payload(header, b"\x00" * 16)  # too short
        with pytest.raises(ProtocolError):
            tensors_from_payload(header, b"\x00" * 64)  # too long

    def test_rejects_bad_shape_values(self):
        with pytest.raises(ProtocolError):
            tensors_from_payload({"shapes": {"a": [0, 2]}}, b"")
        with pytest.raises(ProtocolError):
            tensors_from_payload({"shapes": {"a": "nope"}}, b"")


class TestReferenceVectors:
    """Shipped binary frames parse to their recorded headers and payloads."""

    def test_all_vectors_parse(self):
        import hashlib
        from pathlib import Path

        fixtures = Path(__file__).parent / "fixtures"
        expected = json.loads((fixtures / "expected.json").read_text())
        assert expected, "no reference vectors shipped"
        for name, want in expected.items():
            data = (fixtures / name).read_bytes()
            header, payload, used = parse_frame(data)
            assert used == len(data), name
            assert header == want["header"], name
            assert len(payload) == want["payload_len"], name
            assert hashlib.sha256(payload).hexdigest() == \
                want["payload_sha256"], name

    def test_denoise_vector_round_trips_through_echo_server(self):
        import socket

        from simstex_bridge.server import serve_background
        from pathlib import Path

        data = (Path(__file__).parent / "fixtures"
                / "denoise_request.bin").read_bytes()
        server = serve_background()
        try:
            with socket.create_connection(("127.0.0.1", server.port),
                                          timeout=10) as s:
                s.sendall(data)
                from simstex_bridge.wire import read_frame

                resp, payload = read_frame(s)
            assert resp["ok"] is True
            # echo mode: response payload == request latents block
            lat_bytes = 4 * 64 * 64 * 4
            _, req_payload, _ = parse_frame(data)
            assert payload == req_payload[:lat_bytes]
        finally:
            server.shutdown()
