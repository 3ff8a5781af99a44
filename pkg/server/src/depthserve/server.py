"""Reference network oracle: blur-depth behind the binary tensor protocol.

Serves ``POST /v1/predict`` and ``GET /v1/info`` over HTTP.  Messages are a
24-byte little-endian header (magic ``BPRT``, version 1, dtype 1 for
float32, two reserved flag bytes, then u32 n/c/H/W) followed by the
row-major float32 payload.  The model is depth = 10 * 5x5 box blur of the
channel-mean image with replicate padding, computed in float64 and rounded
to float32, so responses for identical requests are byte-identical.

This is a deliberately independent implementation (no code shared with any
client) used for wire-conformance testing.  ``--defend`` adds a
query-fingerprint duplicate detector whose verdict is reported in the
``X-Query-Flagged`` response header; ``--latency`` adds a fixed per-request
delay to emulate rate-limited services.
"""

from __future__ import annotations

import argparse
import struct
import sys
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"BPRT"
HEADER = struct.Struct("<4sBBHIIII")
MAX_PAYLOAD = 64 * 1024 * 1024
MAX_BATCH = 1024


class BadRequest(ValueError):
    pass


def parse_message(data):
    if len(data) < HEADER.size:
        raise BadRequest(f"message of {len(data)} bytes is shorter than the header")
    magic, version, dtype, flags, n, c, h, w = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadRequest(f"bad magic {magic!r}")
    if version != 1:
        raise BadRequest(f"unsupported version {version}")
    if dtype != 1:
        raise BadRequest(f"unsupported dtype {dtype}")
    if flags != 0:
        raise BadRequest(f"nonzero reserved flags {flags}")
    if n == 0 or c == 0 or h == 0 or w == 0:
        raise BadRequest("empty tensor")
    expected = n * c * h * w * 4
    payload = data[HEADER.size:]
    if len(payload) != expected:
        raise BadRequest(f"payload has {len(payload)} bytes, header promises {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(n, c, h, w)
    if not np.all(np.isfinite(arr)):
        raise BadRequest("non-finite values in payload")
    return arr


def build_message(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    n, c, h, w = arr.shape
    return HEADER.pack(MAGIC, 1, 1, 0, n, c, h, w) + arr.tobytes()


def blur_depth(batch):
    """10 * 5x5 replicate-padded box blur of the channel-mean image."""
    gray = np.asarray(batch, dtype=np.float64).mean(axis=1)
    padded = np.pad(gray, ((0, 0), (2, 2), (2, 2)), mode="edge")
    rows = sliding_window_view(padded, 5, axis=1).mean(axis=-1)
    blurred = sliding_window_view(rows, 5, axis=2).mean(axis=-1)
    return (10.0 * blurred[:, None]).astype(np.float32)


class DuplicateDetector:
    """Minimal query-fingerprint store: 50 smallest 64-bit window hashes."""

    LEVELS = 32
    WINDOW = 64
    STRIDE = 32
    KEEP = 50
    THRESHOLD = 25
    BASE = 1099511628211

    def __init__(self):
        self._coeffs = np.array(
            [pow(self.BASE, self.WINDOW - 1 - i, 2**64) for i in range(self.WINDOW)],
            dtype=np.uint64,
        )
        self._postings = {}
        self._count = 0

    def observe(self, image):
        stream = np.clip(np.floor(image * self.LEVELS), 0, self.LEVELS - 1)
        stream = stream.astype(np.uint8).reshape(-1)
        if len(stream) < self.WINDOW:
            pad = np.zeros(self.WINDOW, dtype=np.uint8)
            pad[: len(stream)] = stream
            stream = pad
        windows = sliding_window_view(stream, self.WINDOW)[:: self.STRIDE]
        hashes = (windows.astype(np.uint64) * self._coeffs[None, :]).sum(axis=1)
        fingerprint = np.unique(hashes)[: self.KEEP]
        counts = {}
        for value in fingerprint:
            for qid in self._postings.get(int(value), ()):
                counts[qid] = counts.get(qid, 0) + 1
        flagged = bool(counts) and max(counts.values()) >= self.THRESHOLD
        qid = self._count
        self._count += 1
        for value in fingerprint:
            self._postings.setdefault(int(value), []).append(qid)
        return flagged


class PredictHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    model = staticmethod(blur_depth)
    info_line = b"d=1 frames=1 H=64 W=64"
    detector = None
    latency = 0.0

    def log_message(self, fmt, *args):
        pass

    def _reply(self, status, body, content_type="text/plain", extra=()):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for key, value in extra:
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path != "/v1/info":
            return self._reply(404, b"unknown path")
        self._reply(200, self.info_line)

    def do_POST(self):
        if self.path != "/v1/predict":
            return self._reply(404, b"unknown path")
        length = int(self.headers.get("Content-Length", "0"))
        if length > HEADER.size + MAX_PAYLOAD:
            return self._reply(413, b"payload too large")
        data = self.rfile.read(length)
        if self.latency > 0:
            time.sleep(self.latency)
        try:
            batch = parse_message(data)
        except BadRequest as exc:
            return self._reply(400, str(exc).encode("ascii", "replace"))
        if batch.shape[0] > MAX_BATCH:
            return self._reply(413, b"batch too large")
        extra = []
        if self.detector is not None:
            flagged = 0
            for sample in batch:
                if self.detector.observe(sample[:3]):
                    flagged = 1
            extra.append(("X-Query-Flagged", str(flagged)))
        out = self.model(batch)
        self._reply(200, build_message(out), "application/octet-stream", extra)


def make_server(host="127.0.0.1", port=0, height=64, width=64, defend=False,
                latency=0.0):
    handler = type("Handler", (PredictHandler,), {
        "info_line": f"d=1 frames=1 H={height} W={width}".encode("ascii"),
        "detector": DuplicateDetector() if defend else None,
        "latency": latency,
    })
    return ThreadingHTTPServer((host, port), handler)


def main(argv=None):
    parser = argparse.ArgumentParser(description="Reference blur-depth oracle server")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0, help="0 picks a free port")
    parser.add_argument("--height", type=int, default=64)
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--defend", action="store_true",
                        help="enable the query-fingerprint detector")
    parser.add_argument("--latency", type=float, default=0.0,
                        help="fixed per-request delay in seconds")
    args = parser.parse_args(argv)
    server = make_server(args.host, args.port, args.height, args.width,
                         args.defend, args.latency)
    print(f"{server.server_address[0]}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
