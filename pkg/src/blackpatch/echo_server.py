"""Minimal wire-protocol echo endpoint for client self-tests.

Implements the same HTTP surface as a real model server but with a
trivial deterministic model: the response for each sample is the mean
over its input channels (d=1).  Startup prints the bound ``host:port`` on
its own line so test harnesses can scrape the address.
"""

from __future__ import annotations

from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .remote import ProtocolError, TruncationError, decode_tensor, encode_tensor


class EchoHandler(BaseHTTPRequestHandler):
    def log_message(self, fmt, *args):  # keep test output clean
        pass

    def _fail(self, status, message):
        body = message.encode("ascii", "replace")
        self.send_response(status)
        self.send_header("Content-Type", "text/plain")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path != "/v1/info":
            return self._fail(404, f"unknown path {self.path}")
        body = b"d=1 frames=1 H=0 W=0"
        self.send_response(200)
        self.send_header("Content-Type", "text/plain")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        if self.path != "/v1/predict":
            return self._fail(404, f"unknown path {self.path}")
        length = int(self.headers.get("Content-Length", "0"))
        data = self.rfile.read(length)
        try:
            batch = decode_tensor(data)
        except (ProtocolError, TruncationError) as exc:
            return self._fail(400, str(exc))
        out = batch.mean(axis=1, keepdims=True).astype(np.float32)
        body = encode_tensor(out)
        self.send_response(200)
        self.send_header("Content-Type", "application/octet-stream")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


def make_echo_server(host="127.0.0.1", port=0):
    return ThreadingHTTPServer((host, port), EchoHandler)


def serve_echo(host="127.0.0.1", port=0):
    server = make_echo_server(host, port)
    print(f"{server.server_address[0]}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
