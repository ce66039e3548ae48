"""Real-socket backend: framed TCP, plain HTTP, and short-range over TCP.

Wire format for framed exchanges is a 4-byte big-endian length prefix
followed by a UTF-8 JSON body. The short-range emulation runs the same
advertise/connect/subscribe/notify contract as the simulated backend, so
agent code does not know which one it is on.
"""

from __future__ import annotations

import base64
import http.client
import json
import logging
import socket
import socketserver
import struct
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Optional

from ..runtime import RealQueue
from . import (
    DISCONNECTED,
    CentralPort,
    ConnectionRefused,
    Notification,
    PeripheralDelegate,
    RequestClient,
    RequestTimeout,
    Session,
    SessionClosed,
    TransportError,
    Unauthorized,
    Unreachable,
)

logger = logging.getLogger(__name__)

MAX_FRAME = 64 * 1024 * 1024


def send_frame(sock: socket.socket, payload: bytes) -> None:
    if len(payload) > MAX_FRAME:
        raise TransportError(f"frame too large: {len(payload)} bytes")
    sock.sendall(struct.pack(">I", len(payload)) + payload)


def recv_frame(sock: socket.socket) -> Optional[bytes]:
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise TransportError(f"frame too large: {length} bytes")
    body = _recv_exact(sock, length)
    if body is None:
        raise TransportError("connection closed mid-frame")
    return body


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    chunks = b""
    while len(chunks) < n:
        chunk = sock.recv(n - len(chunks))
        if not chunk:
            if chunks:
                raise TransportError("connection closed mid-frame")
            return None
        chunks += chunk
    return chunks


def parse_hostport(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {address!r}")
    return host, int(port)


class TcpRequestClient(RequestClient):
    """One connection per request; simple and restart-friendly."""

    def request(self, dest: str, payload: bytes, timeout_ms: int = 10_000, label: str = "") -> bytes:
        host, port = parse_hostport(dest)
        timeout_s = max(timeout_ms, 1) / 1000.0
        try:
            with socket.create_connection((host, port), timeout=timeout_s) as sock:
                sock.settimeout(timeout_s)
                send_frame(sock, payload)
                response = recv_frame(sock)
        except ConnectionRefusedError as exc:
            raise ConnectionRefused(str(exc)) from exc
        except socket.timeout as exc:
            raise RequestTimeout(f"request to {dest} timed out") from exc
        except OSError as exc:
            raise ConnectionRefused(f"request to {dest} failed: {exc}") from exc
        if response is None:
            raise TransportError(f"server at {dest} closed the connection")
        return response


class FrameServer:
    """Threaded framed-TCP server dispatching each frame to a handler."""

    def __init__(self, host: str, port: int, handler: Callable[[str, bytes], bytes]) -> None:
        outer = self

        class _Handler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                peer = f"{self.client_address[0]}:{self.client_address[1]}"
                while True:
                    try:
                        payload = recv_frame(self.request)
                    except (TransportError, OSError):
                        return
                    if payload is None:
                        return
                    try:
                        response = outer._handler(peer, payload)
                    except Exception:
                        logger.exception("frame handler failed")
                        return
                    try:
                        send_frame(self.request, response)
                    except OSError:
                        return

        class _Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._handler = handler
        try:
            self._server = _Server((host, port), _Handler)
        except OSError as exc:
            raise OSError(f"cannot bind {host}:{port}: {exc}") from exc
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name=f"frame-server:{self.port}", daemon=True)
        self._thread.start()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()


# -- HTTP (control API, heartbeat sink) --------------------------------------

Router = Callable[[str, str, Optional[dict]], tuple[int, dict]]


class HttpServer:
    def __init__(self, host: str, port: int, router: Router) -> None:
        outer_router = router

        class _Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def _dispatch(self, method: str) -> None:
                body = None
                length = int(self.headers.get("Content-Length") or 0)
                if length:
                    raw = self.rfile.read(length)
                    try:
                        body = json.loads(raw.decode("utf-8"))
                    except (UnicodeDecodeError, json.JSONDecodeError):
                        self._reply(400, {"error": "invalid-json"})
                        return
                try:
                    status, obj = outer_router(method, self.path, body)
                except Exception:
                    logger.exception("router failed for %s %s", method, self.path)
                    status, obj = 500, {"error": "internal"}
                self._reply(status, obj)

            def _reply(self, status: int, obj: dict) -> None:
                data = json.dumps(obj).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self) -> None:
                self._dispatch("GET")

            def do_POST(self) -> None:
                self._dispatch("POST")

            def log_message(self, fmt: str, *args: Any) -> None:
                logger.debug("http %s", fmt % args)

        self._server = ThreadingHTTPServer((host, port), _Handler)
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name=f"http-server:{self.port}", daemon=True)
        self._thread.start()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()


class HttpJsonClient:
    """Minimal JSON-over-HTTP client matching the sim shim's interface."""

    def call(self, dest: str, method: str, path: str, body: Optional[dict],
             timeout_ms: int = 10_000, label: str = "") -> tuple[int, dict]:
        host, port = parse_hostport(dest)
        conn = http.client.HTTPConnection(host, port, timeout=max(timeout_ms, 1) / 1000.0)
        try:
            data = json.dumps(body).encode("utf-8") if body is not None else None
            headers = {"Content-Type": "application/json"} if data else {}
            conn.request(method, path, body=data, headers=headers)
            response = conn.getresponse()
            raw = response.read()
            obj = json.loads(raw.decode("utf-8")) if raw else {}
            return response.status, obj
        except ConnectionRefusedError as exc:
            raise ConnectionRefused(str(exc)) from exc
        except socket.timeout as exc:
            raise RequestTimeout(f"{method} {path} to {dest} timed out") from exc
        except OSError as exc:
            raise ConnectionRefused(f"{method} {path} to {dest} failed: {exc}") from exc
        finally:
            conn.close()


# -- short-range over TCP -----------------------------------------------------


class TcpPeripheralServer:
    """Peripheral (mote) side: accepts one central at a time."""

    def __init__(self, host: str, port: int, peripheral_id: str, paired_central: str,
                 delegate: PeripheralDelegate) -> None:
        self.peripheral_id = peripheral_id
        self.paired_central = paired_central
        self.delegate = delegate
        self._session_lock = threading.Lock()
        self._session: Optional[TcpPeripheralSession] = None
        outer = self

        class _Handler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                outer._serve_connection(self.request)

        class _Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = _Server((host, port), _Handler)
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name=f"peripheral:{peripheral_id}", daemon=True)
        self._thread.start()

    def _serve_connection(self, sock: socket.socket) -> None:
        try:
            hello = recv_frame(sock)
            if hello is None:
                return
            msg = json.loads(hello.decode("utf-8"))
            if msg.get("t") != "hello" or msg.get("peripheral") != self.peripheral_id:
                send_frame(sock, json.dumps({"t": "reject"}).encode())
                return
            if msg.get("central") != self.paired_central:
                send_frame(sock, json.dumps({"t": "unauthorized"}).encode())
                return
            send_frame(sock, json.dumps({"t": "ok"}).encode())
        except (OSError, ValueError, TransportError):
            return
        session = TcpPeripheralSession(self, sock, str(msg.get("central")))
        with self._session_lock:
            previous, self._session = self._session, session
        if previous is not None:
            previous.kill("superseded")
        try:
            self.delegate.on_connect(session)
            session.reader_loop()
        finally:
            session.kill("closed")
            with self._session_lock:
                if self._session is session:
                    self._session = None

    def shutdown(self) -> None:
        with self._session_lock:
            session = self._session
        if session is not None:
            session.kill("shutdown")
        self._server.shutdown()
        self._server.server_close()


class TcpPeripheralSession:
    """Peripheral's view of the connection: it can notify and receive writes."""

    def __init__(self, server: TcpPeripheralServer, sock: socket.socket, central_id: str) -> None:
        self._server = server
        self._sock = sock
        self.central_id = central_id
        self.peripheral_id = server.peripheral_id
        self._send_lock = threading.Lock()
        self._sequences: dict[str, int] = {}
        self._open = True

    @property
    def open(self) -> bool:
        return self._open

    def notify(self, characteristic: str, payload: bytes) -> int:
        with self._send_lock:
            if not self._open:
                raise SessionClosed("session is closed")
            seq = self._sequences.get(characteristic, 0) + 1
            self._sequences[characteristic] = seq
            frame = json.dumps({
                "t": "ntf",
                "char": characteristic,
                "payload_b64": base64.b64encode(payload).decode("ascii"),
                "seq": seq,
            }).encode("utf-8")
            try:
                send_frame(self._sock, frame)
            except OSError as exc:
                self._open = False
                raise SessionClosed(str(exc)) from exc
            return seq

    def reader_loop(self) -> None:
        while self._open:
            try:
                frame = recv_frame(self._sock)
            except (OSError, TransportError):
                break
            if frame is None:
                break
            try:
                msg = json.loads(frame.decode("utf-8"))
                if msg.get("t") == "write":
                    payload = base64.b64decode(msg["payload_b64"])
                    self._server.delegate.on_write(self, str(msg["char"]), payload)
            except Exception:
                logger.exception("peripheral write handler failed")
        self.kill("peer-closed")

    def kill(self, reason: str) -> None:
        if not self._open:
            return
        self._open = False
        # shutdown() wakes any thread blocked in recv on either end; a bare
        # close() would leave the peer hanging until its next send.
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass
        try:
            self._server.delegate.on_disconnect(self)
        except Exception:
            logger.exception("on_disconnect failed")


class TcpCentral(CentralPort):
    """Central (node) side; the allow-list maps peripheral ids to addresses."""

    def __init__(self, central_id: str, peripheral_addresses: dict[str, str],
                 connect_timeout_ms: int = 3000) -> None:
        self.central_id = central_id
        self._addresses = dict(peripheral_addresses)
        self._timeout_s = connect_timeout_ms / 1000.0

    def connect(self, peripheral_id: str) -> "TcpCentralSession":
        address = self._addresses.get(peripheral_id)
        if address is None:
            raise Unauthorized(f"{peripheral_id} not in allow-list of {self.central_id}")
        host, port = parse_hostport(address)
        try:
            sock = socket.create_connection((host, port), timeout=self._timeout_s)
        except OSError as exc:
            raise Unreachable(f"cannot reach {peripheral_id} at {address}: {exc}") from exc
        try:
            sock.settimeout(self._timeout_s)
            send_frame(sock, json.dumps({
                "t": "hello", "central": self.central_id, "peripheral": peripheral_id,
            }).encode("utf-8"))
            reply = recv_frame(sock)
            if reply is None:
                raise Unreachable(f"{peripheral_id} closed during handshake")
            verdict = json.loads(reply.decode("utf-8")).get("t")
        except (OSError, ValueError, TransportError) as exc:
            sock.close()
            raise Unreachable(f"handshake with {peripheral_id} failed: {exc}") from exc
        if verdict == "unauthorized":
            sock.close()
            raise Unauthorized(f"{peripheral_id} rejected pairing with {self.central_id}")
        if verdict != "ok":
            sock.close()
            raise Unreachable(f"{peripheral_id} rejected connection: {verdict}")
        sock.settimeout(None)
        return TcpCentralSession(sock, peripheral_id)


class TcpCentralSession(Session):
    def __init__(self, sock: socket.socket, peripheral_id: str) -> None:
        self._sock = sock
        self.peripheral_id = peripheral_id
        self._open = True
        self._streams: dict[str, RealQueue] = {}
        self._streams_lock = threading.Lock()
        self._send_lock = threading.Lock()
        self._reader = threading.Thread(target=self._reader_loop,
                                        name=f"central-session:{peripheral_id}", daemon=True)
        self._reader.start()

    @property
    def open(self) -> bool:
        return self._open

    def subscribe(self, characteristic: str) -> RealQueue:
        with self._streams_lock:
            stream = self._streams.get(characteristic)
            if stream is None:
                stream = RealQueue()
                self._streams[characteristic] = stream
            return stream

    def write(self, characteristic: str, payload: bytes) -> None:
        with self._send_lock:
            if not self._open:
                raise SessionClosed("session is closed")
            frame = json.dumps({
                "t": "write",
                "char": characteristic,
                "payload_b64": base64.b64encode(payload).decode("ascii"),
            }).encode("utf-8")
            try:
                send_frame(self._sock, frame)
            except OSError as exc:
                self.close()
                raise SessionClosed(str(exc)) from exc

    def _reader_loop(self) -> None:
        while self._open:
            try:
                frame = recv_frame(self._sock)
            except (OSError, TransportError):
                break
            if frame is None:
                break
            try:
                msg = json.loads(frame.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                continue
            if msg.get("t") == "ntf":
                stream = self.subscribe(str(msg["char"]))
                stream.put(Notification(
                    characteristic=str(msg["char"]),
                    payload=base64.b64decode(msg["payload_b64"]),
                    sequence=int(msg["seq"]),
                ))
        self.close()

    def close(self) -> None:
        if not self._open:
            return
        self._open = False
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass
        with self._streams_lock:
            streams = list(self._streams.values())
        for stream in streams:
            stream.put(DISCONNECTED)
