"""Loopback HTTP/JSON service the annotation console talks to.

Endpoints:
    GET  /api/pending  -> current AnnotationTask as JSON, or 204 when idle
    POST /api/label    -> {"task_id": str, "label": int}; 200 on accept,
                          409 stale/duplicate, 422 label out of range
    GET  /api/status   -> engine progress snapshot
    GET  /api/classes  -> {"classes": [names...]}

The engine publishes an immutable status dict after each step; the service
reads it and the annotation exchange, never the engine's mutable state. No
authentication: this is a single-user desk tool on loopback.
"""

from __future__ import annotations

import json
import threading
from dataclasses import asdict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .oracle import AnnotationExchange


class ServiceError(RuntimeError):
    pass


class AnnotationService:
    def __init__(self, exchange: AnnotationExchange, class_names: list[str],
                 status_fn):
        self.exchange = exchange
        self.class_names = class_names
        self.status_fn = status_fn
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    # --- lifecycle -----------------------------------------------------

    def start(self, bind: str = "127.0.0.1:0") -> tuple[str, int]:
        host, _, port = bind.partition(":")
        service = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):  # quiet by default
                pass

            def _send(self, code: int, payload: dict | None) -> None:
                body = b"" if payload is None else json.dumps(payload).encode()
                self.send_response(code)
                if body:
                    self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                if body:
                    self.wfile.write(body)

            def do_GET(self):
                if self.path == "/api/pending":
                    task = service.exchange.pending()
                    if task is None:
                        self._send(204, None)
                    else:
                        self._send(200, asdict(task))
                elif self.path == "/api/status":
                    self._send(200, service.status_fn())
                elif self.path == "/api/classes":
                    self._send(200, {"classes": service.class_names})
                else:
                    self._send(404, {"error": f"unknown path {self.path}"})

            def do_POST(self):
                if self.path != "/api/label":
                    self._send(404, {"error": f"unknown path {self.path}"})
                    return
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    payload = json.loads(self.rfile.read(length) or b"{}")
                    task_id = payload["task_id"]
                    label = payload["label"]
                except (ValueError, KeyError, json.JSONDecodeError) as exc:
                    self._send(422, {"error": f"bad request body: {exc}"})
                    return
                if not isinstance(label, int) or not 0 <= label < len(service.class_names):
                    self._send(422, {"error": f"label {label!r} out of range "
                                              f"[0, {len(service.class_names)})"})
                    return
                if service.exchange.submit(task_id, label):
                    self._send(200, {"status": "ok"})
                else:
                    self._send(409, {"error": "stale task: already answered, "
                                              "expired, or unknown"})

        try:
            self._server = ThreadingHTTPServer((host or "127.0.0.1", int(port or 0)),
                                               Handler)
        except OSError as exc:
            raise ServiceError(f"cannot bind {bind!r}: {exc}") from exc
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="annotation-service", daemon=True)
        self._thread.start()
        return self._server.server_address[0], self._server.server_address[1]

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
