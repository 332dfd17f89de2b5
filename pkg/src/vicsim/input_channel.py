"""Synthetic input injection over a QMP-shaped, newline-delimited JSON protocol.

Synthetic (host-injected) and scripted (player) input share one guest queue.
The origin tag exists only on the host side; the guest drains origin-free
records whose byte serialization is identical for both sources.
"""
from __future__ import annotations

import enum
import heapq
import json
import os
import socket
import socketserver
import struct
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional, Union

from .errors import ChannelClosed, EndpointUnavailable

GREETING = {"QMP": {"version": {"sandbox": 1}}}


class Device(str, enum.Enum):
    MOUSE = "mouse"
    KEYBOARD = "keyboard"


class Action(str, enum.Enum):
    BUTTON_DOWN = "button_down"
    BUTTON_UP = "button_up"
    KEY_DOWN = "key_down"
    KEY_UP = "key_up"
    MOVE = "move"


class Origin(str, enum.Enum):
    SYNTHETIC = "synthetic"
    SCRIPTED = "scripted"


BUTTON_CODES = {"left": 1, "right": 2, "middle": 3}
KEY_CODES = {
    **{c: ord(c) for c in "abcdefghijklmnopqrstuvwxyz0123456789"},
    "spc": 0x20, "shift": 0x10, "ctrl": 0x11, "alt": 0x12, "esc": 0x1B,
    "tab": 0x09, "ret": 0x0D,
}
_DEVICE_CODES = {Device.MOUSE: 1, Device.KEYBOARD: 2}
_ACTION_CODES = {a: i + 1 for i, a in enumerate(Action)}
_WIRE = struct.Struct("<BBhh")


@dataclass(frozen=True)
class GuestInput:
    """What the guest sees of an input event: no origin."""

    device: Device
    action: Action
    detail: Union[str, tuple]

    def to_bytes(self) -> bytes:
        if self.action is Action.MOVE:
            dx, dy = self.detail
            return _WIRE.pack(_DEVICE_CODES[self.device], _ACTION_CODES[self.action], dx, dy)
        table = BUTTON_CODES if self.device is Device.MOUSE else KEY_CODES
        return _WIRE.pack(_DEVICE_CODES[self.device], _ACTION_CODES[self.action], table[self.detail], 0)


@dataclass(frozen=True)
class InputEvent:
    device: Device
    action: Action
    detail: Union[str, tuple]
    origin: Origin = Origin.SYNTHETIC

    def __post_init__(self):
        object.__setattr__(self, "device", Device(self.device))
        object.__setattr__(self, "action", Action(self.action))
        object.__setattr__(self, "origin", Origin(self.origin))
        if self.action is Action.MOVE:
            dx, dy = self.detail
            object.__setattr__(self, "detail", (int(dx), int(dy)))
            if self.device is not Device.MOUSE:
                raise ValueError("move events come from the mouse")
        elif self.action in (Action.BUTTON_DOWN, Action.BUTTON_UP):
            if self.device is not Device.MOUSE or self.detail not in BUTTON_CODES:
                raise ValueError(f"bad mouse button {self.detail!r}")
        else:
            if self.device is not Device.KEYBOARD or self.detail not in KEY_CODES:
                raise ValueError(f"bad key {self.detail!r}")

    def guest_view(self) -> GuestInput:
        return GuestInput(self.device, self.action, self.detail)

    @classmethod
    def button(cls, button: str, down: bool, origin=Origin.SYNTHETIC) -> "InputEvent":
        return cls(Device.MOUSE, Action.BUTTON_DOWN if down else Action.BUTTON_UP, button, origin)

    @classmethod
    def key(cls, key: str, down: bool, origin=Origin.SYNTHETIC) -> "InputEvent":
        return cls(Device.KEYBOARD, Action.KEY_DOWN if down else Action.KEY_UP, key, origin)

    @classmethod
    def move(cls, dx: int, dy: int, origin=Origin.SYNTHETIC) -> "InputEvent":
        return cls(Device.MOUSE, Action.MOVE, (dx, dy), origin)


def event_vocabulary(origin=Origin.SYNTHETIC) -> list[InputEvent]:
    """Every button/key transition plus a spread of mouse moves."""
    events = [InputEvent.button(b, d, origin) for b in BUTTON_CODES for d in (True, False)]
    events += [InputEvent.key(k, d, origin) for k in KEY_CODES for d in (True, False)]
    events += [InputEvent.move(dx, dy, origin) for dx in (-32768, -5, 0, 7, 32767) for dy in (-100, 0, 100)]
    return events


class InputQueue:
    """Guest input queue: producers append, the guest drains at tick boundaries."""

    def __init__(self):
        self._heap: list = []
        self._seq = 0
        self._lock = threading.Lock()
        self.telemetry: Counter = Counter()

    def push(self, event: InputEvent, timestamp: int) -> int:
        with self._lock:
            seq = self._seq
            self._seq += 1
            heapq.heappush(self._heap, (timestamp, seq, event))
            self.telemetry[event.origin.value] += 1
            return seq

    def drain(self, now: int) -> list[GuestInput]:
        out = []
        with self._lock:
            heap = self._heap
            while heap and heap[0][0] <= now:
                out.append(heapq.heappop(heap)[2].guest_view())
        return out

    def __len__(self):
        return len(self._heap)


@dataclass(frozen=True)
class Ack:
    timestamp: int
    seq: int


class InputChannel:
    """In-process synthetic input channel; the socket server wraps one of these."""

    def __init__(self, queue: InputQueue, clock: Callable[[], int], latency_ticks: int = 0):
        self.queue = queue
        self.clock = clock
        self.latency_ticks = latency_ticks
        self.closed = False
        self.injected = 0

    def inject(self, event: InputEvent) -> Ack:
        if self.closed:
            raise ChannelClosed("input channel closed")
        ts = self.clock() + self.latency_ticks
        self.injected += 1
        return Ack(ts, self.queue.push(event, ts))

    def close(self) -> None:
        self.closed = True


def guest_poll_input(game) -> list[GuestInput]:
    return game.input_queue.drain(game.tick)


def scripted_input(queue: InputQueue, event: InputEvent, at_tick: int) -> None:
    """Player input from a test or session script, bypassing the host channel."""
    if event.origin is not Origin.SCRIPTED:
        event = InputEvent(event.device, event.action, event.detail, Origin.SCRIPTED)
    queue.push(event, at_tick)


# -- wire protocol ----------------------------------------------------------

def encode(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def _error(cls: str, desc: str, req_id=None) -> dict:
    out = {"error": {"class": cls, "desc": desc}}
    if req_id is not None:
        out["id"] = req_id
    return out


def _parse_qmp_event(ev) -> InputEvent:
    kind = ev["type"]
    data = ev["data"]
    if kind == "btn":
        return InputEvent.button(data["button"], bool(data["down"]))
    if kind == "key":
        key = data["key"]
        if isinstance(key, dict):
            key = key["data"]
        return InputEvent.key(key, bool(data["down"]))
    if kind == "rel":
        value = int(data["value"])
        if data["axis"] == "x":
            return InputEvent.move(value, 0)
        if data["axis"] == "y":
            return InputEvent.move(0, value)
        raise ValueError(f"unknown axis {data['axis']!r}")
    raise ValueError(f"unsupported input event type {kind!r}")


def qmp_input_command(events: list[InputEvent], device: str = "mouse0") -> dict:
    """Build an input-send-event command for ``events`` (client side)."""
    out = []
    for e in events:
        if e.action is Action.MOVE:
            dx, dy = e.detail
            if dx:
                out.append({"type": "rel", "data": {"axis": "x", "value": dx}})
            if dy:
                out.append({"type": "rel", "data": {"axis": "y", "value": dy}})
        elif e.device is Device.MOUSE:
            out.append({"type": "btn", "data": {"down": e.action is Action.BUTTON_DOWN, "button": e.detail}})
        else:
            out.append({"type": "key", "data": {"down": e.action is Action.KEY_DOWN,
                                                "key": {"type": "qcode", "data": e.detail}}})
    return {"execute": "input-send-event", "arguments": {"device": device, "events": out}}


class QmpProtocol:
    """Line-in, line-out command handler over an :class:`InputChannel`."""

    def __init__(self, channel: InputChannel):
        self.channel = channel
        self._lock = threading.Lock()

    def greeting(self) -> str:
        return encode(GREETING)

    def handle_line(self, line: str) -> str:
        with self._lock:
            return encode(self._dispatch(line))

    def _dispatch(self, line: str) -> dict:
        try:
            req = json.loads(line)
        except json.JSONDecodeError as exc:
            return _error("GenericError", f"JSON parse error: {exc.msg}")
        if not isinstance(req, dict) or not isinstance(req.get("execute"), str):
            return _error("GenericError", "QMP input object member 'execute' is missing")
        req_id = req.get("id")
        cmd = req["execute"]
        if cmd == "qmp_capabilities":
            return self._ok(req_id)
        if cmd == "input-send-event":
            args = req.get("arguments") or {}
            try:
                events = [_parse_qmp_event(ev) for ev in args["events"]]
            except (KeyError, TypeError, ValueError) as exc:
                return _error("GenericError", f"invalid input-send-event arguments: {exc}", req_id)
            try:
                for ev in events:
                    self.channel.inject(ev)
            except ChannelClosed as exc:
                return _error("GenericError", str(exc), req_id)
            return self._ok(req_id)
        return _error("CommandNotFound", f"The command {cmd} has not been found", req_id)

    @staticmethod
    def _ok(req_id) -> dict:
        out = {"return": {}}
        if req_id is not None:
            out["id"] = req_id
        return out


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        proto: QmpProtocol = self.server.protocol
        self.wfile.write((proto.greeting() + "\n").encode())
        for raw in self.rfile:
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            self.wfile.write((proto.handle_line(line) + "\n").encode())


class _UnixServer(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    daemon_threads = True


class _TcpServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True


class QmpServer:
    """Serves :class:`QmpProtocol` on a unix socket path or ``tcp:host:port``."""

    def __init__(self, endpoint: str, channel: InputChannel):
        self.endpoint = endpoint
        self.protocol = QmpProtocol(channel)
        self._server = None
        self._thread: Optional[threading.Thread] = None

    def start(self) -> "QmpServer":
        try:
            if self.endpoint.startswith("tcp:"):
                _, host, port = self.endpoint.split(":")
                server = _TcpServer((host, int(port)), _Handler)
            else:
                server = _UnixServer(self.endpoint, _Handler)
        except (OSError, ValueError) as exc:
            raise EndpointUnavailable(f"{self.endpoint}: {exc}") from exc
        server.protocol = self.protocol
        self._server = server
        self._thread = threading.Thread(target=server.serve_forever, daemon=True)
        self._thread.start()
        return self

    @property
    def address(self):
        return self._server.server_address if self._server else None

    def serve_forever(self) -> None:
        self._thread.join()

    def close(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            if not self.endpoint.startswith("tcp:") and os.path.exists(self.endpoint):
                os.unlink(self.endpoint)
            self._server = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def qmp_serve(endpoint: str, channel: InputChannel) -> QmpServer:
    return QmpServer(endpoint, channel).start()


class QmpClient:
    """Minimal blocking client, used by tests and the CLI."""

    def __init__(self, endpoint: str, timeout: float = 5.0):
        if endpoint.startswith("tcp:"):
            _, host, port = endpoint.split(":")
            self.sock = socket.create_connection((host, int(port)), timeout=timeout)
        else:
            self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            self.sock.settimeout(timeout)
            self.sock.connect(endpoint)
        self._file = self.sock.makefile("rwb")
        self.greeting = self._file.readline().decode().rstrip("\n")

    def send_raw(self, line: str) -> str:
        self._file.write((line + "\n").encode())
        self._file.flush()
        return self._file.readline().decode().rstrip("\n")

    def execute(self, command: dict) -> dict:
        return json.loads(self.send_raw(encode(command)))

    def close(self) -> None:
        self._file.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
