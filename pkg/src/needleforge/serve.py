"""Framed TCP protocol for stateful one-scan-per-step force streaming."""

from __future__ import annotations

import itertools
import json
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .models import STREAMING_KINDS, CapabilityError, Model, StreamState

FRAME_MAGIC = b"OCTS"
HEADER = struct.Struct("<4sBI")
MAX_PAYLOAD = 1 << 20
PROTOCOL_VERSION = 1

HELLO, ASCAN, FORCE, RESET, ERROR, BYE = range(6)


class ProtocolError(RuntimeError):
    """The peer sent something that violates the framing contract."""


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    return HEADER.pack(FRAME_MAGIC, msg_type, len(payload)) + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise ConnectionError("connection closed mid-frame" if got else "connection closed")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    magic, msg_type, length = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if magic != FRAME_MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds {MAX_PAYLOAD}")
    return msg_type, _recv_exact(sock, length) if length else b""


@dataclass
class Session:
    conn_id: int
    state: StreamState
    model: Model
    scans_seen: int = 0

    def reset(self) -> None:
        self.state.reset()
        self.scans_seen = 0


class _Handler(socketserver.BaseRequestHandler):
    server: "ForceServer"

    def handle(self) -> None:
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        model = self.server.model
        session = Session(next(self.server.ids), model.stream_state(), model)
        scan_bytes = 4 * model.spec.d_c
        while True:
            try:
                msg_type, payload = read_frame(sock)
            except ProtocolError as exc:
                self._send(ERROR, str(exc).encode())
                return
            except (ConnectionError, OSError):
                return
            if msg_type == HELLO:
                info = {"d_c": model.spec.d_c, "kind": model.kind, "version": PROTOCOL_VERSION}
                self._send(HELLO, json.dumps(info).encode())
            elif msg_type == ASCAN:
                if len(payload) != scan_bytes:
                    self._send(ERROR, f"ascan payload must be {scan_bytes} bytes, got {len(payload)}".encode())
                    continue
                scan = np.frombuffer(payload, dtype="<f4")
                if not np.all(np.isfinite(scan)):
                    self._send(ERROR, b"ascan contains NaN or Inf")
                    continue
                force = model.forward_stream(session.state, scan)
                session.scans_seen += 1
                self._send(FORCE, struct.pack("<f", force))
            elif msg_type == RESET:
                session.reset()
                self._send(RESET)
            elif msg_type == BYE:
                self._send(BYE)
                return
            else:
                self._send(ERROR, f"unknown message type {msg_type}".encode())

    def _send(self, msg_type: int, payload: bytes = b"") -> None:
        try:
            self.request.sendall(encode_frame(msg_type, payload))
        except OSError:
            pass


class ForceServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 64

    def __init__(self, model: Model, address: tuple[str, int]):
        if model.kind not in STREAMING_KINDS:
            raise CapabilityError(f"{model.kind} does not support streaming inference")
        self.model = model.eval()
        self.ids = itertools.count()
        super().__init__(address, _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host, int(port)


def serve(model: Model, bind_address, background: bool = False) -> ForceServer:
    """Start a server; with ``background`` it runs in a daemon thread and is returned immediately."""
    address = parse_address(bind_address) if isinstance(bind_address, str) else tuple(bind_address)
    server = ForceServer(model, address)
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
    else:
        try:
            server.serve_forever()
        finally:
            server.server_close()
    return server


class Client:
    """Lock-step protocol client."""

    def __init__(self, address, timeout: float = 5.0):
        address = parse_address(address) if isinstance(address, str) else tuple(address)
        self.sock = socket.create_connection(address, timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.info: dict = {}

    def request(self, msg_type: int, payload: bytes = b"") -> tuple[int, bytes]:
        self.sock.sendall(encode_frame(msg_type, payload))
        return read_frame(self.sock)

    def hello(self) -> dict:
        t, payload = self.request(HELLO)
        if t != HELLO:
            raise ProtocolError(f"expected hello reply, got type {t}: {payload!r}")
        self.info = json.loads(payload.decode())
        return self.info

    def predict(self, scan) -> float:
        t, payload = self.request(ASCAN, np.asarray(scan, dtype="<f4").tobytes())
        if t != FORCE:
            raise ProtocolError(f"server error: {payload.decode(errors='replace')}")
        return struct.unpack("<f", payload)[0]

    def reset(self) -> None:
        t, _ = self.request(RESET)
        if t != RESET:
            raise ProtocolError(f"expected reset acknowledgement, got type {t}")

    def close(self) -> None:
        try:
            self.request(BYE)
        except (OSError, ConnectionError, ProtocolError):
            pass
        finally:
            self.sock.close()

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def client_predict(address, scans, timeout: float = 5.0) -> list[float]:
    """hello, one ascan frame per scan, bye; returns one force per scan in order."""
    with Client(address, timeout) as client:
        d_c = client.hello()["d_c"]
        arrays = [np.asarray(s, dtype=np.float32).ravel() for s in scans]
        for i, a in enumerate(arrays):
            if a.shape[0] != d_c:
                raise ValueError(f"scan {i} has {a.shape[0]} pixels; server expects d_c={d_c}")
        return [client.predict(a) for a in arrays]
