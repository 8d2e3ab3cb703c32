"""HTTP server exposing a ModelAdapter over the logit wire protocol.

Endpoints: GET /v1/info, POST /v1/logits, /v1/tokenize, /v1/detokenize.
Bad requests get HTTP 400 with {"error": str}; unexpected failures get
HTTP 500 with the same body shape.
"""

from __future__ import annotations

import base64
import binascii
import io
import json
import queue
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from PIL import Image, UnidentifiedImageError

from .model import InvalidTokenError, ModelAdapter


@dataclass(frozen=True)
class ServerConfig:
    model: str = "stub"
    device: str = "cpu"
    host: str = "127.0.0.1"
    port: int = 8760
    max_concurrent: int = 4

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port {self.port} outside [1, 65535]")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")


class _Job:
    def __init__(self, fn):
        self.fn = fn
        self.done = threading.Event()
        self.result = None
        self.error: BaseException | None = None


class SerialExecutor:
    """Runs jobs one at a time through a bounded queue.

    Model forward passes are not assumed reentrant, so a single worker
    owns the model; admission blocks once max_concurrent requests are
    already waiting.
    """

    def __init__(self, max_concurrent: int):
        self._queue: queue.Queue[_Job] = queue.Queue(maxsize=max_concurrent)
        self._worker = threading.Thread(target=self._run, daemon=True)
        self._worker.start()

    def _run(self):
        while True:
            job = self._queue.get()
            try:
                job.result = job.fn()
            except BaseException as exc:
                job.error = exc
            finally:
                job.done.set()
                self._queue.task_done()

    def submit(self, fn):
        job = _Job(fn)
        self._queue.put(job)
        job.done.wait()
        if job.error is not None:
            raise job.error
        return job.result


def _decode_image(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
    except (TypeError, binascii.Error) as exc:
        raise ValueError(f"bad base64 image: {exc}") from exc
    try:
        img = Image.open(io.BytesIO(raw))
        return np.asarray(img.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"undecodable image: {exc}") from exc


def make_server(model: ModelAdapter, cfg: ServerConfig) -> ThreadingHTTPServer:
    executor = SerialExecutor(cfg.max_concurrent)

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):
            pass

        def _send(self, code: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/v1/info":
                self._send(200, {"name": model.name, "vocab_size": model.vocab_size})
            else:
                self._send(404, {"error": f"unknown path {self.path}"})

        def do_POST(self):
            try:
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length))
                if not isinstance(body, dict):
                    raise ValueError("body must be a JSON object")
            except (ValueError, json.JSONDecodeError):
                self._send(400, {"error": "malformed JSON body"})
                return
            try:
                if self.path == "/v1/logits":
                    image = _decode_image(str(body.get("image_png_b64", "")))
                    prompt = str(body.get("prompt", ""))
                    prefix = [int(i) for i in body.get("prefix_ids", [])]
                    row = executor.submit(lambda: model.next_logits(image, prompt, prefix))
                    self._send(200, {"logits": [float(x) for x in row]})
                elif self.path == "/v1/tokenize":
                    ids = executor.submit(lambda: model.tokenize(str(body.get("text", ""))))
                    self._send(200, {"ids": [int(i) for i in ids]})
                elif self.path == "/v1/detokenize":
                    ids = [int(i) for i in body.get("ids", [])]
                    text = executor.submit(lambda: model.detokenize(ids))
                    self._send(200, {"text": text})
                else:
                    self._send(404, {"error": f"unknown path {self.path}"})
            except (InvalidTokenError, ValueError, TypeError) as exc:
                self._send(400, {"error": str(exc)})
            except Exception as exc:
                self._send(500, {"error": str(exc)})

    return ThreadingHTTPServer((cfg.host, cfg.port), Handler)


def serve(cfg: ServerConfig, model: ModelAdapter) -> None:
    server = make_server(model, cfg)
    try:
        server.serve_forever()
    finally:
        server.server_close()
