"""Sidecar service exposing a depth-conditioned latent diffusion model
(or a weight-free echo stand-in) over a framed TCP protocol."""

from .server import BridgeServer, EchoBackend, serve_background
from .wire import (NeedMoreData, ProtocolError, encode_frame, parse_frame,
                   payload_from_tensors, read_frame, tensors_from_payload)

__version__ = "0.1.0"
