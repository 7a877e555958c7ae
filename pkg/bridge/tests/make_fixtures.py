#!/usr/bin/env python3
"""Regenerate the reference wire-protocol vectors in tests/fixtures/.

Each .bin holds one well-formed frame; expected.json records the header and
a SHA-256 of the payload so the vectors stay self-checking.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from simstex_bridge.wire import encode_frame, payload_from_tensors

FIXTURES = Path(__file__).parent / "fixtures"


def main():
    FIXTURES.mkdir(exist_ok=True)
    rng = np.random.default_rng(123456)
    lat = rng.standard_normal((4, 64, 64)).astype(np.float32)
    depth = rng.uniform(0, 1, (1, 64, 64)).astype(np.float32)

    vectors = {
        "info_request.bin": ({"op": "info"}, b""),
        "denoise_request.bin": (
            {"op": "denoise",
             "shapes": {"latents": [4, 64, 64], "depth": [1, 64, 64]},
             "t": 500, "prompt": "reference vector",
             "w_joint": 5.0, "w_text": 0.0},
            payload_from_tensors(lat, depth)),
        "decode_request.bin": (
            {"op": "decode", "shapes": {"latents": [4, 64, 64]}},
            payload_from_tensors(lat)),
        "echo_request.bin": (
            {"op": "echo", "shapes": {"blob": [64]}},
            bytes(range(256))),
        "error_response.bin": (
            {"ok": False, "error": "reference error"}, b""),
    }
    expected = {}
    for name, (header, payload) in vectors.items():
        (FIXTURES / name).write_bytes(encode_frame(header, payload))
        expected[name] = {
            "header": header,
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
            "payload_len": len(payload),
        }
    (FIXTURES / "expected.json").write_text(json.dumps(expected, indent=2,
                                                       sort_keys=True))
    print(f"wrote {len(vectors)} vectors to {FIXTURES}")


if __name__ == "__main__":
    main()
