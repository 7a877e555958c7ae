"""Pluggable epsilon predictors: analytic oracles and the remote bridge client.

Oracles are closed-form minimizers of the denoising objective for known data
distributions, which makes the whole sampling stack verifiable without any
trained model.  No oracle consults depth, prompt, or guidance; the guidance
path still runs because combining identical predictions is the identity.
"""

from __future__ import annotations

import json
import math
import os
import socket
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .diffusion import GuidanceConfig, NoiseSchedule
from .errors import OracleError, TransportError
from .geometry import Camera

BRIDGE_ADDR_ENV = "SIMSTEX_BRIDGE_ADDR"


@dataclass
class DenoiseRequest:
    latents: np.ndarray          # (h, w, C) float32
    t: int
    depth: np.ndarray            # (h, w) in [0, 1]
    prompt: str = ""
    view_suffix: str = ""
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    view_id: int = 0
    camera: Optional[Camera] = None


class ZeroDenoiser:
    """Predicts zero noise everywhere; useful for plumbing tests."""

    def predict_epsilon(self, req: DenoiseRequest) -> np.ndarray:
        return np.zeros_like(np.asarray(req.latents, dtype=np.float32))


class DeltaOracle:
    """Exact score of a point mass: every view has one registered clean target.

    epsilon*(x_t) = (x_t - sqrt(a)*x0*) / sqrt(1-a).  Plugging this into the
    clean-sample formula returns x0* identically, so a sampler wired through
    this oracle must reproduce the targets up to its own bookkeeping error.
    Targets are keyed by view id so the sampler can query mid-trajectory.
    """

    def __init__(self, targets: Dict[int, np.ndarray], sched: NoiseSchedule):
        self.targets = {int(k): np.asarray(v, dtype=np.float32)
                        for k, v in targets.items()}
        self.sched = sched

    def predict_epsilon(self, req: DenoiseRequest) -> np.ndarray:
        if req.view_id not in self.targets:
            raise OracleError(f"no target registered for view {req.view_id}")
        target = self.targets[req.view_id]
        a = self.sched.alpha_bar(req.t)
        x = np.asarray(req.latents, dtype=np.float32)
        out = (x - math.sqrt(a) * target) / math.sqrt(1.0 - a)
        return out.astype(np.float32, copy=False)


class DeltaTextureOracle:
    """DeltaOracle variant whose targets are renders of a fixed texture.

    Needed when cameras change per step (jittered sweeps): the target for a
    view is recomputed from the request's camera and cached.
    """

    def __init__(self, texture: np.ndarray, mesh, sched: NoiseSchedule):
        from .rasterizer import rasterize, render_texture

        self.texture = np.asarray(texture, dtype=np.float32)
        self.mesh = mesh
        self.sched = sched
        self._rasterize = rasterize
        self._render = render_texture
        self._cache: Dict[Camera, np.ndarray] = {}

    def target_for(self, camera: Camera) -> np.ndarray:
        hit = self._cache.get(camera)
        if hit is None:
            raster = self._rasterize(self.mesh, camera,
                                     self.texture.shape[0], self.texture.shape[1])
            hit = self._render(self.texture, raster)
            self._cache[camera] = hit
        return hit

    def predict_epsilon(self, req: DenoiseRequest) -> np.ndarray:
        if req.camera is None:
            raise OracleError("request carries no camera")
        target = self.target_for(req.camera)
        a = self.sched.alpha_bar(req.t)
        x = np.asarray(req.latents, dtype=np.float32)
        return ((x - math.sqrt(a) * target) / math.sqrt(1.0 - a)).astype(np.float32)


@dataclass(frozen=True)
class GaussianOracleParams:
    mu: tuple = (0.0,)
    s: tuple = (1.0,)

    def __post_init__(self):
        if any(v <= 0 for v in self.s):
            raise OracleError("oracle std must be positive")


class GaussianOracle:
    """Exact score of N(mu, s^2 I) data, per channel.

    epsilon*(x_t) = sqrt(1-a) * (x_t - sqrt(a)*mu) / (a*s^2 + 1 - a)
    """

    def __init__(self, params: GaussianOracleParams, sched: NoiseSchedule):
        self.params = params
        self.sched = sched

    def _broadcast(self, values: tuple, channels: int) -> np.ndarray:
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        if arr.size == 1:
            arr = np.full(channels, arr[0])
        if arr.size != channels:
            raise OracleError("per-channel parameter count mismatch")
        return arr

    def predict_epsilon(self, req: DenoiseRequest) -> np.ndarray:
        x = np.asarray(req.latents, dtype=np.float32)
        c = x.shape[-1]
        mu = self._broadcast(self.params.mu, c).astype(np.float32)
        s = self._broadcast(self.params.s, c).astype(np.float32)
        a = self.sched.alpha_bar(req.t)
        denom = (a * s * s + (1.0 - a)).astype(np.float32)
        out = math.sqrt(1.0 - a) * (x - math.sqrt(a) * mu) / denom
        return out.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# wire protocol client
#
# Frame layout (everything little-endian):
#   u32 total_len        length of the rest of the frame
#   u32 header_len       length of the UTF-8 JSON header
#   header bytes
#   payload bytes        float32 tensors, C-H-W order, concatenated in the
#                        order their shapes appear in header["shapes"]

MAX_FRAME = 1 << 28


def encode_frame(header: dict, payload: bytes = b"") -> bytes:
    head = json.dumps(header).encode("utf-8")
    total = 4 + len(head) + len(payload)
    return struct.pack("<II", total, len(head)) + head + payload


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        part = sock.recv(n - got)
        if not part:
            raise TransportError("connection closed mid-frame")
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def read_frame(sock: socket.socket):
    raw = _read_exact(sock, 4)
    (total,) = struct.unpack("<I", raw)
    if total < 4 or total > MAX_FRAME:
        raise TransportError(f"bad frame length {total}")
    body = _read_exact(sock, total)
    (hlen,) = struct.unpack("<I", body[:4])
    if hlen > total - 4:
        raise TransportError("header length exceeds frame")
    try:
        header = json.loads(body[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TransportError(f"unparseable header: {exc}") from exc
    return header, body[4 + hlen:]


def tensor_to_payload(arr: np.ndarray) -> bytes:
    """(H, W, C) array -> C-H-W float32 little-endian bytes."""
    chw = np.ascontiguousarray(np.moveaxis(np.asarray(arr, np.float32), -1, 0),
                               dtype="<f4")
    return chw.tobytes()


def payload_to_tensor(data: bytes, shape) -> np.ndarray:
    """C-H-W float32 bytes -> (H, W, C) array."""
    c, h, w = shape
    n = c * h * w * 4
    arr = np.frombuffer(data[:n], dtype="<f4").reshape(c, h, w)
    return np.moveaxis(arr, 0, -1).copy()


class RemoteDenoiser:
    """Client for the sidecar service; one request in flight per connection."""

    def __init__(self, address: Optional[str] = None, timeout: float = 30.0):
        if address is None:
            address = os.environ.get(BRIDGE_ADDR_ENV)
        if not address:
            raise TransportError(
                f"no bridge address; pass one or set {BRIDGE_ADDR_ENV}")
        host, _, port = address.rpartition(":")
        if not host or not port.isdigit():
            raise TransportError(f"bad bridge address {address!r}")
        self.host = host
        self.port = int(port)
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(
                    (self.host, self.port), timeout=self.timeout)
            except OSError as exc:
                raise TransportError(
                    f"cannot reach bridge at {self.host}:{self.port}: {exc}"
                ) from exc
        return self._sock

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def _roundtrip(self, header: dict, payload: bytes = b""):
        sock = self._connect()
        try:
            sock.sendall(encode_frame(header, payload))
            resp, data = read_frame(sock)
        except (OSError, TransportError) as exc:
            self.close()
            if isinstance(exc, TransportError):
                raise
            raise TransportError(f"bridge i/o failed: {exc}") from exc
        if not resp.get("ok", False):
            raise TransportError(f"bridge error: {resp.get('error', 'unknown')}")
        return resp, data

    def info(self) -> dict:
        resp, _ = self._roundtrip({"op": "info"})
        return resp.get("info", {})

    def predict_epsilon(self, req: DenoiseRequest) -> np.ndarray:
        lat = np.asarray(req.latents, dtype=np.float32)
        h, w, c = lat.shape
        depth = np.asarray(req.depth, dtype=np.float32).reshape(h, w, 1)
        prompt = req.prompt
        if req.view_suffix:
            prompt = f"{prompt}, {req.view_suffix}" if prompt else req.view_suffix
        # the wire carries zero-based timesteps (the served models' indexing);
        # the engine's schedule counts diffusion time from 1
        header = {
            "op": "denoise",
            "shapes": {"latents": [c, h, w], "depth": [1, h, w]},
            "t": int(req.t) - 1,
            "prompt": prompt,
            "w_joint": req.guidance.w_joint,
            "w_text": req.guidance.w_text,
        }
        payload = tensor_to_payload(lat) + tensor_to_payload(depth)
        resp, data = self._roundtrip(header, payload)
        shape = resp.get("shapes", {}).get("result", [c, h, w])
        return payload_to_tensor(data, shape)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        lat = np.asarray(latents, dtype=np.float32)
        h, w, c = lat.shape
        header = {"op": "decode", "shapes": {"latents": [c, h, w]}}
        resp, data = self._roundtrip(header, tensor_to_payload(lat))
        shape = resp.get("shapes", {}).get("result", [3, 8 * h, 8 * w])
        return payload_to_tensor(data, shape)


def parse_denoiser_spec(spec: str, sched: NoiseSchedule, mesh=None):
    """Build a denoiser from a CLI spec string.

    zero | gaussian:mu,s | delta:<texture.ltx path> | remote:host:port
    """
    if spec == "zero":
        return ZeroDenoiser()
    if spec.startswith("gaussian:"):
        try:
            mu_s = spec.split(":", 1)[1].split(",")
            mu, s = float(mu_s[0]), float(mu_s[1])
        except (IndexError, ValueError) as exc:
            raise OracleError(f"bad gaussian spec {spec!r}") from exc
        return GaussianOracle(GaussianOracleParams((mu,), (s,)), sched)
    if spec.startswith("delta:"):
        from .io_formats import load_ltx

        path = spec.split(":", 1)[1]
        if mesh is None:
            raise OracleError("delta oracle needs the run mesh")
        return DeltaTextureOracle(load_ltx(path), mesh, sched)
    if spec.startswith("remote:"):
        return RemoteDenoiser(spec.split(":", 1)[1])
    raise OracleError(f"unknown denoiser spec {spec!r}")
