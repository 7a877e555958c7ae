"""TCP sidecar serving denoise/decode requests over the framed protocol.

Echo mode needs no model weights: `denoise` returns the request latents
bit-exactly and `decode` nearest-upsamples the first three latent channels.
That is enough to integration-test any client end to end.  The stable
diffusion backend is optional and loaded only when requested.

One request is in flight per connection; multiple connections are served by
threads, and backend access is serialized with a lock so a single-GPU model
never sees concurrent calls.
"""

from __future__ import annotations

import argparse
import json
import socketserver
import sys
import threading

import numpy as np

from .wire import (FrameSyncError, ProtocolError, encode_frame,
                   payload_from_tensors, read_frame, tensors_from_payload)

LATENT_CHANNELS = 4
LATENT_SIZE = 64
DOWNSCALE = 8
T_RANGE = (0, 1000)


class EchoBackend:
    """Weight-free stand-in with the exact interface of the real model."""

    name = "echo"

    def info(self) -> dict:
        return {"model": self.name, "channels": LATENT_CHANNELS,
                "downscale": DOWNSCALE,
                "ops": ["info", "denoise", "decode", "echo"]}

    def denoise(self, latents: np.ndarray, depth: np.ndarray, t: int,
                prompt: str, w_joint: float, w_text: float) -> np.ndarray:
        return latents

    def decode(self, latents: np.ndarray) -> np.ndarray:
        rgb = latents[:3]
        up = np.repeat(np.repeat(rgb, DOWNSCALE, axis=1), DOWNSCALE, axis=2)
        return np.clip(up, 0.0, 1.0)


class StableDiffusionBackend:
    """Depth-conditioned latent diffusion backend (requires weights).

    The client sends disparity-style depth in [0, 1] (near 1, far 0,
    background 0); the model wants per-image standardized depth, so the map
    is re-normalized to zero mean and unit variance over the frame before
    conditioning.  Guidance is applied here, server-side, with the joint
    (depth+text) and optional text-only terms.
    """

    name = "sd2-depth"

    def __init__(self, model_id: str = "stabilityai/stable-diffusion-2-depth"):
        try:
            import torch  # noqa: F401
            from diffusers import StableDiffusionDepth2ImgPipeline  # noqa: F401
        except ImportError as exc:
            raise RuntimeError(
                "the model backend needs torch+diffusers installed "
                "(pip install 'simstex-bridge[model]') and model weights "
                f"for {model_id}; use --mode echo for weight-free testing"
            ) from exc
        raise RuntimeError(
            "model weights are not available in this environment; "
            "run with --mode echo")

    def info(self) -> dict:
        return {"model": self.name, "channels": LATENT_CHANNELS,
                "downscale": DOWNSCALE,
                "ops": ["info", "denoise", "decode", "echo"]}


def _bad(msg: str) -> bytes:
    return encode_frame({"ok": False, "error": msg})


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        backend = self.server.backend
        lock = self.server.backend_lock
        while True:
            try:
                frame = read_frame(self.request)
            except FrameSyncError:
                # length corruption desyncs the stream; nothing more to parse
                try:
                    self.request.sendall(_bad("unrecoverable frame error"))
                except OSError:
                    pass
                return
            except ProtocolError as exc:
                # framing is intact, only the header was bad; keep serving
                try:
                    self.request.sendall(_bad(str(exc)))
                    continue
                except OSError:
                    return
            except OSError:
                return
            if frame is None:
                return
            header, payload = frame
            try:
                response = self._dispatch(backend, lock, header, payload)
            except ProtocolError as exc:
                response = _bad(str(exc))
            except Exception as exc:  # keep the connection alive
                response = _bad(f"internal error: {exc}")
            try:
                self.request.sendall(response)
            except OSError:
                return

    def _dispatch(self, backend, lock, header: dict, payload: bytes) -> bytes:
        op = header.get("op")
        if op == "info":
            return encode_frame({"ok": True, "op": op, "info": backend.info()})
        if op == "echo":
            return encode_frame({"ok": True, "op": op,
                                 "shapes": header.get("shapes", {})}, payload)
        if op == "denoise":
            tensors = tensors_from_payload(header, payload)
            if "latents" not in tensors or "depth" not in tensors:
                raise ProtocolError("denoise needs latents and depth tensors")
            lat, depth = tensors["latents"], tensors["depth"]
            if lat.shape != (LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE):
                raise ProtocolError(
                    f"latents must be {LATENT_CHANNELS}x{LATENT_SIZE}x"
                    f"{LATENT_SIZE}, got {list(lat.shape)}")
            if depth.shape != (1, LATENT_SIZE, LATENT_SIZE):
                raise ProtocolError(
                    f"depth must be 1x{LATENT_SIZE}x{LATENT_SIZE}, "
                    f"got {list(depth.shape)}")
            t = header.get("t")
            if not isinstance(t, int) or not T_RANGE[0] <= t < T_RANGE[1]:
                raise ProtocolError(f"t must be an int in {T_RANGE}")
            with lock:
                eps = backend.denoise(lat, depth, t,
                                      header.get("prompt", ""),
                                      float(header.get("w_joint", 1.0)),
                                      float(header.get("w_text", 0.0)))
            eps = np.asarray(eps, dtype=np.float32)
            return encode_frame(
                {"ok": True, "op": op, "shapes": {"result": list(eps.shape)}},
                payload_from_tensors(eps))
        if op == "decode":
            tensors = tensors_from_payload(header, payload)
            if "latents" not in tensors:
                raise ProtocolError("decode needs a latents tensor")
            lat = tensors["latents"]
            if lat.shape != (LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE):
                raise ProtocolError(
                    f"latents must be {LATENT_CHANNELS}x{LATENT_SIZE}x"
                    f"{LATENT_SIZE}, got {list(lat.shape)}")
            with lock:
                rgb = backend.decode(lat)
            rgb = np.asarray(rgb, dtype=np.float32)
            return encode_frame(
                {"ok": True, "op": op, "shapes": {"result": list(rgb.shape)}},
                payload_from_tensors(rgb))
        raise ProtocolError(f"unknown op {op!r}")


class BridgeServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, host: str, port: int, backend):
        super().__init__((host, port), _Handler)
        self.backend = backend
        self.backend_lock = threading.Lock()

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve_background(host: str = "127.0.0.1", port: int = 0,
                     backend=None) -> BridgeServer:
    """Start a server on a daemon thread; returns it (port via .port)."""
    server = BridgeServer(host, port, backend or EchoBackend())
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="simstex-bridge",
        description="latent diffusion sidecar over framed TCP")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=7461)
    parser.add_argument("--mode", choices=["echo", "sd2-depth"],
                        default="echo")
    args = parser.parse_args(argv)
    backend = EchoBackend() if args.mode == "echo" else StableDiffusionBackend()
    server = BridgeServer(args.host, args.port, backend)
    print(json.dumps({"listening": f"{args.host}:{server.port}",
                      "mode": args.mode}))
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
