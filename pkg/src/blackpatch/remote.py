"""Bit-exact binary tensor protocol and the HTTP oracle client.

Wire layout (all little-endian): 4-byte magic ``BPRT``, version byte (1),
dtype byte (1 = 32-bit float), 2 reserved flag bytes (0), then four u32
dimensions n, c, H, W followed by ``n*c*H*W`` float32 payload values in
row-major order.  A prediction request POSTs a batch to
``<endpoint>/v1/predict`` (flow samples stack both frames on the channel
axis, c = 6) and the response uses the same layout with c equal to the
model's output channels.  ``GET /v1/info`` describes the served model as
``d=<1|2> frames=<1|2> H=<int> W=<int>``.
"""

from __future__ import annotations

import struct
import urllib.error
import urllib.request

import numpy as np

from .oracles import Oracle

__all__ = [
    "HEADER_SIZE",
    "MAGIC",
    "ProtocolError",
    "RemoteOracle",
    "ServiceError",
    "TransportError",
    "TruncationError",
    "decode_tensor",
    "encode_tensor",
    "fetch_info",
]

MAGIC = b"BPRT"
VERSION = 1
DTYPE_F32 = 1
HEADER = struct.Struct("<4sBBHIIII")
HEADER_SIZE = HEADER.size  # 24 bytes


class ProtocolError(ValueError):
    """Response bytes violate the wire contract."""


class TruncationError(ProtocolError):
    """Payload shorter than the header promises."""


class ServiceError(RuntimeError):
    """Server answered with a non-200 status."""

    def __init__(self, status, body):
        super().__init__(f"server returned status {status}: {body[:200]}")
        self.status = status
        self.body = body


class TransportError(RuntimeError):
    """Network-level failure (timeout, refused connection); retryable."""


def encode_tensor(tensor):
    """Serialize an (n, c, H, W) array to header + float32 payload bytes."""
    arr = np.ascontiguousarray(tensor, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"expected a 4-d tensor, got shape {arr.shape}")
    n, c, h, w = arr.shape
    if n == 0 or arr.size == 0:
        raise ValueError("cannot encode an empty tensor")
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot encode non-finite values")
    header = HEADER.pack(MAGIC, VERSION, DTYPE_F32, 0, n, c, h, w)
    return header + arr.tobytes()


def decode_tensor(data):
    """Parse header + payload bytes back into an (n, c, H, W) float32 array."""
    if len(data) < HEADER_SIZE:
        raise TruncationError(f"message of {len(data)} bytes is shorter than the header")
    magic, version, dtype, flags, n, c, h, w = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if dtype != DTYPE_F32:
        raise ProtocolError(f"unsupported dtype code {dtype}")
    if flags != 0:
        raise ProtocolError(f"nonzero reserved flags {flags:#x}")
    expected = n * c * h * w * 4
    payload = data[HEADER_SIZE:]
    if len(payload) < expected:
        raise TruncationError(
            f"payload has {len(payload)} bytes, header promises {expected}"
        )
    if len(payload) > expected:
        raise ProtocolError(f"trailing garbage: {len(payload) - expected} extra bytes")
    arr = np.frombuffer(payload, dtype="<f4").reshape(n, c, h, w)
    if not np.all(np.isfinite(arr)):
        raise ProtocolError("non-finite values in payload")
    return arr.copy()


def _post(url, body, timeout):
    req = urllib.request.Request(url, data=body,
                                 headers={"Content-Type": "application/octet-stream"},
                                 method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read()
    except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
        raise TransportError(f"POST {url} failed: {exc}") from exc


def fetch_info(endpoint, timeout=10.0):
    """Fetch and parse the `/v1/info` description of a served model."""
    url = endpoint.rstrip("/") + "/v1/info"
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            status, text = resp.status, resp.read().decode("ascii", "replace")
    except urllib.error.HTTPError as exc:
        raise ServiceError(exc.code, exc.read().decode("ascii", "replace")) from exc
    except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
        raise TransportError(f"GET {url} failed: {exc}") from exc
    if status != 200:
        raise ServiceError(status, text)
    info = {}
    for token in text.split():
        key, _, value = token.partition("=")
        info[key] = int(value)
    for key in ("d", "frames", "H", "W"):
        if key not in info:
            raise ProtocolError(f"info response missing field {key!r}: {text!r}")
    return info


class RemoteOracle(Oracle):
    """Oracle served over HTTP at ``<endpoint>/v1/predict``.

    One probe batch maps to one request; no batching across attack steps
    and no automatic retries (a timeout surfaces as a retryable
    :class:`TransportError` for the caller to handle).  ``delay`` inserts
    a fixed pause before each request for rate-limited services.
    """

    def __init__(self, endpoint, out_channels=None, frames_per_sample=None,
                 timeout=30.0, delay=0.0):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.delay = delay
        if out_channels is None or frames_per_sample is None:
            info = fetch_info(self.endpoint, timeout)
            out_channels = info["d"] if out_channels is None else out_channels
            frames_per_sample = (info["frames"] if frames_per_sample is None
                                 else frames_per_sample)
        self.out_channels = out_channels
        self.frames_per_sample = frames_per_sample

    def evaluate(self, batch):
        batch = np.asarray(batch)
        if batch.ndim != 4 or batch.shape[0] == 0:
            raise ValueError(f"expected a nonempty (n, c, H, W) batch, got {batch.shape}")
        if self.delay > 0:
            import time

            time.sleep(self.delay)
        status, data = _post(self.endpoint + "/v1/predict",
                             encode_tensor(batch), self.timeout)
        if status != 200:
            raise ServiceError(status, data.decode("ascii", "replace"))
        out = decode_tensor(data)
        n, d, h, w = out.shape
        if n != batch.shape[0] or d != self.out_channels or (h, w) != batch.shape[2:]:
            raise ProtocolError(
                f"response shape {out.shape} does not match request "
                f"(n={batch.shape[0]}, d={self.out_channels}, "
                f"H={batch.shape[2]}, W={batch.shape[3]})"
            )
        return out.astype(np.float64)
