"""Serve any Backend over the JSON/HTTP wire protocol.

Thin stdlib server used to mount the toy backend for integration
testing of the HTTP client; the protocol matches backend.HttpBackend.
"""

from __future__ import annotations

import base64
import binascii
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .backend import Backend, InvalidTokenError, UnsupportedPromptError
from .imgaug import ImageBuffer


def _make_handler(backend: Backend):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):  # quiet by default
            pass

        def _send(self, code: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _read_json(self) -> dict:
            length = int(self.headers.get("Content-Length", 0))
            return json.loads(self.rfile.read(length))

        def do_GET(self):
            if self.path == "/v1/info":
                info = backend.info()
                self._send(200, {"name": info.name, "vocab_size": info.vocab_size})
            else:
                self._send(404, {"error": f"unknown path {self.path}"})

        def do_POST(self):
            try:
                body = self._read_json()
            except (ValueError, json.JSONDecodeError):
                self._send(400, {"error": "malformed JSON body"})
                return
            try:
                if self.path == "/v1/logits":
                    try:
                        png = base64.b64decode(body["image_png_b64"], validate=True)
                    except (KeyError, TypeError, binascii.Error):
                        self._send(400, {"error": "bad image_png_b64"})
                        return
                    image = ImageBuffer.from_png(png)
                    logits = backend.next_logits(
                        image, str(body.get("prompt", "")), [int(i) for i in body.get("prefix_ids", [])]
                    )
                    self._send(200, {"logits": [float(x) for x in logits]})
                elif self.path == "/v1/tokenize":
                    self._send(200, {"ids": backend.tokenize(str(body.get("text", "")))})
                elif self.path == "/v1/detokenize":
                    ids = [int(i) for i in body.get("ids", [])]
                    self._send(200, {"text": backend.detokenize(ids)})
                else:
                    self._send(404, {"error": f"unknown path {self.path}"})
            except (InvalidTokenError, UnsupportedPromptError, ValueError) as exc:
                self._send(400, {"error": str(exc)})
            except Exception as exc:  # pragma: no cover - defensive
                self._send(500, {"error": str(exc)})

    return Handler


def make_server(backend: Backend, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    return ThreadingHTTPServer((host, port), _make_handler(backend))


class ServerThread:
    """Run a backend server on a daemon thread; for tests and the CLI."""

    def __init__(self, backend: Backend, host: str = "127.0.0.1", port: int = 0):
        self.server = make_server(backend, host, port)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
