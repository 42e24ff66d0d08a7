"""HTTP model service exposing only classification, and a client-side oracle for it.

Wire protocol:

* ``POST /classify`` with a body of exactly 8*d bytes (little-endian float64)
  answers 8*m bytes of confidences. Any other body length is a 400.
* ``GET /meta`` answers ``"<d> <m>"`` as decimal text and nothing else.

Clients may identify themselves with an ``X-Client-Id`` header; otherwise the
peer address is logged. Every classify request is appended to the access log
as ``timestamp_ms,client,bytes_in``.
"""

from __future__ import annotations

import csv
import http.client
import logging
import socket
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import urlsplit

import numpy as np

from adi.errors import (
    ADIError,
    BindFailure,
    ConnectionFailure,
    ModelLoadFailure,
    ProtocolError,
)
from adi.oracle import Oracle, load_model

log = logging.getLogger(__name__)

CLIENT_HEADER = "X-Client-Id"


@dataclass(frozen=True)
class ServiceConfig:
    model_path: Path
    host: str = "127.0.0.1"
    port: int = 0
    access_log: Path | None = None
    rate_limit: float | None = None

    def __post_init__(self):
        if not 0 <= self.port <= 65535:
            raise ValueError(f"invalid port {self.port}")
        if self.rate_limit is not None and self.rate_limit <= 0:
            raise ValueError("rate limit must be positive")


class _AccessLog:
    def __init__(self, path: Path | None):
        self._lock = threading.Lock()
        self.count = 0
        self.path = path
        self._fh = None
        if path is not None:
            new = not path.exists() or path.stat().st_size == 0
            self._fh = path.open("a", newline="")
            self._writer = csv.writer(self._fh)
            if new:
                self._writer.writerow(["timestamp_ms", "client", "bytes_in"])
                self._fh.flush()

    def record(self, client: str, nbytes: int) -> None:
        with self._lock:
            self.count += 1
            if self._fh is not None:
                self._writer.writerow([int(time.time() * 1000), client, nbytes])
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


class _RateLimiter:
    """Per-client sliding one-second window."""

    def __init__(self, per_second: float | None):
        self.per_second = per_second
        self._lock = threading.Lock()
        self._hits: dict[str, deque] = defaultdict(deque)

    def retry_after(self, client: str) -> float:
        """0 if the request may proceed, else seconds to wait."""
        if self.per_second is None:
            return 0.0
        now = time.monotonic()
        with self._lock:
            q = self._hits[client]
            while q and now - q[0] >= 1.0:
                q.popleft()
            if len(q) >= self.per_second:
                return max(1.0 - (now - q[0]), 0.001)
            q.append(now)
            return 0.0


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # headers and body go out in separate writes; without this each keep-alive
    # request stalls on the peer's delayed ACK
    disable_nagle_algorithm = True
    server: "_Server"

    def setup(self):
        super().setup()
        self.server.track(self.connection)

    def finish(self):
        try:
            super().finish()
        finally:
            self.server.untrack(self.connection)

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, code: int, body: bytes, ctype: str = "text/plain",
              headers: dict | None = None) -> None:
        self.send_response(code)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path != "/meta":
            self._send(404, b"not found\n")
            return
        model = self.server.model
        self._send(200, f"{model.input_dim} {model.num_classes}".encode())

    def do_POST(self):
        if self.path != "/classify":
            self._discard_body()
            self._send(404, b"not found\n")
            return
        try:
            length = int(self.headers.get("Content-Length", ""))
        except ValueError:
            self._send(411, b"content-length required\n", headers={"Connection": "close"})
            self.close_connection = True
            return
        body = self.rfile.read(length) if length > 0 else b""
        client = self.headers.get(CLIENT_HEADER) or self.client_address[0]
        wait = self.server.limiter.retry_after(client)
        if wait:
            self._send(429, b"rate limit exceeded\n",
                       headers={"Retry-After": str(max(1, int(np.ceil(wait))))})
            return
        model = self.server.model
        if len(body) != 8 * model.input_dim:
            self._send(400, f"expected {8 * model.input_dim} bytes, got {len(body)}\n".encode())
            return
        x = np.frombuffer(body, dtype="<f8")
        probs = model.predict_proba(x)[0]
        self.server.access_log.record(client, len(body))
        self._send(200, probs.astype("<f8").tobytes(), "application/octet-stream")

    def _discard_body(self):
        try:
            n = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            n = 0
        if n > 0:
            self.rfile.read(n)


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    model: Oracle
    access_log: _AccessLog
    limiter: _RateLimiter

    def __init__(self, *args, **kwargs):
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        super().__init__(*args, **kwargs)

    def track(self, sock: socket.socket) -> None:
        with self._conns_lock:
            self._conns.add(sock)

    def untrack(self, sock: socket.socket) -> None:
        with self._conns_lock:
            self._conns.discard(sock)

    def drop_connections(self) -> None:
        """Sever open keep-alive connections, as a stopped process would."""
        with self._conns_lock:
            conns, self._conns = self._conns, set()
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class ModelService:
    """A running classify-only HTTP service around one model file."""

    def __init__(self, config: ServiceConfig):
        try:
            model = load_model(config.model_path)
        except (OSError, ADIError) as exc:
            raise ModelLoadFailure(f"cannot load model {config.model_path}: {exc}") from exc
        try:
            self._server = _Server((config.host, config.port), _Handler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {config.host}:{config.port}: {exc}") from exc
        self._server.model = model
        self._server.access_log = _AccessLog(config.access_log)
        self._server.limiter = _RateLimiter(config.rate_limit)
        self.config = config
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._server.server_address[:2]
        return host, port

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    @property
    def access_count(self) -> int:
        return self._server.access_log.count

    def start(self) -> "ModelService":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        try:
            self._server.serve_forever()
        finally:
            self.close()

    def close(self) -> None:
        if self._thread is not None:
            self._server.shutdown()
            self._thread.join()
            self._thread = None
        self._server.server_close()
        self._server.drop_connections()
        self._server.access_log.close()

    def __enter__(self) -> "ModelService":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()


class _Connection(http.client.HTTPConnection):
    def connect(self):
        super().connect()
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


class RemoteOracle(Oracle):
    """Oracle backed by a model service; one HTTP request per classified vector."""

    kind = "remote"

    def __init__(self, endpoint: str, client_id: str | None = None, timeout: float = 10.0):
        parts = urlsplit(endpoint if "://" in endpoint else "http://" + endpoint)
        if not parts.hostname or not parts.port:
            raise ValueError(f"endpoint needs host and port: {endpoint!r}")
        self.host, self.port = parts.hostname, parts.port
        self.client_id = client_id
        self.timeout = timeout
        self._local = threading.local()
        d, m = self.meta()
        super().__init__(d, m)

    def _conn(self) -> http.client.HTTPConnection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = _Connection(self.host, self.port, timeout=self.timeout)
            self._local.conn = conn
        return conn

    def _request(self, method: str, path: str, body: bytes | None = None) -> bytes:
        headers = {}
        if self.client_id:
            headers[CLIENT_HEADER] = self.client_id
        if body is not None:
            headers["Content-Type"] = "application/octet-stream"
        for attempt in range(2):
            conn = self._conn()
            try:
                conn.request(method, path, body=body, headers=headers)
                resp = conn.getresponse()
                data = resp.read()
                break
            except (http.client.RemoteDisconnected, BrokenPipeError, ConnectionResetError) as exc:
                # a kept-alive socket may have been closed by the server; retry once fresh
                conn.close()
                self._local.conn = None
                if attempt:
                    raise ConnectionFailure(f"{self.host}:{self.port}: {exc}") from exc
            except (OSError, http.client.HTTPException) as exc:
                conn.close()
                self._local.conn = None
                raise ConnectionFailure(f"{self.host}:{self.port}: {exc}") from exc
        if resp.status != 200:
            raise ProtocolError(f"{method} {path} -> {resp.status}: {data[:200]!r}")
        return data

    def meta(self) -> tuple[int, int]:
        data = self._request("GET", "/meta")
        try:
            d, m = (int(v) for v in data.decode().split())
        except ValueError:
            raise ProtocolError(f"malformed /meta response {data!r}") from None
        return d, m

    def _probs(self, X: np.ndarray) -> np.ndarray:
        out = np.empty((X.shape[0], self.num_classes))
        for i, x in enumerate(X):
            data = self._request("POST", "/classify", np.ascontiguousarray(x, dtype="<f8").tobytes())
            if len(data) != 8 * self.num_classes:
                raise ProtocolError(f"expected {8 * self.num_classes} bytes, got {len(data)}")
            out[i] = np.frombuffer(data, dtype="<f8")
        return out

    def predict_proba(self, X):
        # Every remote evaluation is a real access, so it is counted too.
        X = self._check(X)
        out = self._probs(X)
        self.stats.add(X.shape[0])
        return out

    def close(self) -> None:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
            self._local.conn = None


def serve(config: ServiceConfig) -> None:
    """Run the service in the foreground until interrupted."""
    svc = ModelService(config)
    log.info("serving %s on %s", config.model_path, svc.url)
    try:
        svc.serve_forever()
    except KeyboardInterrupt:
        pass

