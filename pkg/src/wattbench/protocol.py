"""Wire protocol between the monitor (server, time authority, dataset host)
and the device-under-test agent (client).

Transport is a single TCP connection carrying UTF-8 lines, each one a JSON
object with a ``kind`` field.  Binary file chunks travel base64-encoded, 64
KiB per chunk before encoding.  Field names are documented in
docs/protocol.md and are part of the contract.

The server accepts one agent session at a time: concurrent sessions would
contaminate the power attribution the harness exists to measure.
"""

from __future__ import annotations

import base64
import errno
import json
import socket
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .model import LABEL_PATTERN, RunManifest, format_timestamp
from .timesync import (
    DEFAULT_DISPERSION_BOUND_S,
    DEFAULT_PROBE_COUNT,
    SyncEstimate,
    correct_timestamp,
    estimate_offset,
)

KINDS = (
    "HELLO",
    "TIME_PROBE",
    "TIME_REPLY",
    "EVENT",
    "RESULT",
    "FETCH",
    "DATA",
    "END_RUN",
    "ERROR",
)

CHUNK_SIZE = 65536


class ProtocolError(Exception):
    pass


class ProtocolViolation(ProtocolError):
    pass


class AddressInUse(OSError):
    pass


class FetchOutsideRoot(Exception):
    pass


class ConnectFailed(ConnectionError):
    pass


class ServerError(Exception):
    def __init__(self, message: str, code: str = "server_error"):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Message:
    kind: str
    fields: dict

    def __getitem__(self, key: str):
        return self.fields[key]

    def get(self, key: str, default=None):
        return self.fields.get(key, default)


def encode_message(message: Message) -> str:
    """One message per line; JSON escaping keeps the payload newline-free."""
    if message.kind not in KINDS:
        raise ProtocolError(f"unknown message kind {message.kind!r}")
    if "kind" in message.fields:
        raise ProtocolError("body must not contain a 'kind' field")
    return json.dumps({"kind": message.kind, **message.fields}) + "\n"


def decode_message(line: str) -> Message:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"undecodable message: {exc}") from exc
    if not isinstance(data, dict) or "kind" not in data:
        raise ProtocolError("message is not an object with a 'kind' field")
    kind = data.pop("kind")
    if kind not in KINDS:
        raise ProtocolError(f"unknown message kind {kind!r}")
    return Message(kind, data)


def parse_address(address: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {address!r}")
    return host, int(port)


class _Run:
    """Open trace files and label bookkeeping for one run in progress."""

    def __init__(self, directory: Path, hello: dict):
        self.directory = directory
        self.hello = hello
        directory.mkdir(parents=True, exist_ok=True)
        # Line-buffered so a crash never leaves a torn line behind.
        self.events = open(directory / "events.csv", "w", buffering=1, encoding="utf-8")
        self.results = open(directory / "results.csv", "w", buffering=1, encoding="utf-8")
        self.result_count = 0
        self.start_indexes: set[int] = set()
        self.end_indexes: set[int] = set()

    def close(self):
        self.events.close()
        self.results.close()


class RunStore:
    """Per-run append sink: events.csv, results.csv and a final manifest.json.

    Appends are the only synchronized operation shared with the protocol
    thread; each one is bounded-time (a single buffered line write).
    """

    def __init__(self, runs_dir: str | Path, power_file: Optional[str] = None):
        self.runs_dir = Path(runs_dir)
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self.power_file = power_file
        self._lock = threading.Lock()
        self._runs: dict[str, _Run] = {}

    def hello(self, fields: dict) -> None:
        run_id = fields["run_id"]
        with self._lock:
            if run_id in self._runs:
                raise ProtocolViolation(f"run {run_id!r} already active")
            self._runs[run_id] = _Run(self.runs_dir / run_id, fields)

    def event(self, run_id: str, label: str, time_s: float) -> None:
        with self._lock:
            run = self._require(run_id)
            run.events.write(f"{label},{format_timestamp(time_s)}\n")
            index = _batch_index(label)
            if index is not None:
                bucket = run.start_indexes if "start" in label else run.end_indexes
                bucket.add(index)

    def result(self, run_id: str, sample_id: str, topk: list) -> None:
        cells = [sample_id]
        for index, score in topk:
            cells.append(str(int(index)))
            cells.append(f"{float(score):.6f}")
        with self._lock:
            run = self._require(run_id)
            run.results.write(",".join(cells) + "\n")
            run.result_count += 1

    def end_run(self, run_id: str) -> RunManifest:
        with self._lock:
            run = self._runs.pop(run_id, None)
            if run is None:
                raise ProtocolViolation(f"END_RUN for unknown run {run_id!r}")
            run.close()
            manifest = RunManifest(
                run_id=run_id,
                batch_count=len(run.start_indexes & run.end_indexes),
                batch_size=int(run.hello.get("batch_size", 1)),
                device_name=str(run.hello.get("device", "")),
                model_name=str(run.hello.get("model", "")),
                clock_offset=float(run.hello.get("clock_offset", 0.0)),
                clock_rtt=float(run.hello.get("clock_rtt", 0.0)),
                power_file=self.power_file,
                events_file="events.csv",
                results_file="results.csv" if run.result_count else None,
                clock_dispersion=_optional_float(run.hello.get("clock_dispersion")),
            )
            (run.directory / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
            return manifest

    def close(self) -> None:
        with self._lock:
            for run in self._runs.values():
                run.close()
            self._runs.clear()

    def _require(self, run_id: str) -> _Run:
        run = self._runs.get(run_id)
        if run is None:
            raise ProtocolViolation(f"message for unknown run {run_id!r}")
        return run


def _batch_index(label: str) -> Optional[int]:
    m = LABEL_PATTERN.match(label)
    return int(m.group(3)) if m and m.group(3) is not None else None


def _optional_float(value) -> Optional[float]:
    return None if value is None else float(value)


def resolve_fetch_path(dataset_root: str | Path, rel_path: str) -> Path:
    """Resolve a FETCH path, rejecting anything escaping the dataset root."""
    root = Path(dataset_root).resolve()
    target = (root / rel_path).resolve()
    if target != root and root not in target.parents:
        raise FetchOutsideRoot(rel_path)
    return target


class ServerHandle:
    """Running server; ``stop()`` shuts the listener down and joins the thread."""

    def __init__(self, sock: socket.socket, address: tuple[str, int]):
        self.address = address
        self._sock = sock
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._current: Optional[socket.socket] = None

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        current = self._current
        if current is not None:
            try:
                current.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(
    listen_address: str | tuple[str, int],
    dataset_root: str | Path,
    run_sink: RunStore,
    *,
    clock: Callable[[], float] = time.time,
) -> ServerHandle:
    """Start the monitor-side server; returns once it is accepting."""
    host, port = parse_address(listen_address)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        if exc.errno == errno.EADDRINUSE:
            raise AddressInUse(f"address {host}:{port} in use") from exc
        raise
    sock.listen(1)
    sock.settimeout(0.2)
    handle = ServerHandle(sock, sock.getsockname()[:2])

    def accept_loop():
        while not handle._stop.is_set():
            try:
                conn, _ = sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            handle._current = conn
            try:
                _handle_session(conn, Path(dataset_root), run_sink, clock)
            finally:
                handle._current = None
                try:
                    conn.close()
                except OSError:
                    pass

    thread = threading.Thread(target=accept_loop, name="wattbench-server", daemon=True)
    handle._thread = thread
    thread.start()
    return handle


def _send_line(conn: socket.socket, message: Message) -> None:
    conn.sendall(encode_message(message).encode("utf-8"))


def _handle_session(conn, dataset_root: Path, run_sink: RunStore, clock) -> None:
    reader = conn.makefile("r", encoding="utf-8", newline="\n")
    active_run: Optional[str] = None
    try:
        for line in reader:
            received_at = clock()  # stamped before parsing: this is t2
            try:
                message = decode_message(line)
                active_run = _dispatch(
                    conn, message, received_at, dataset_root, run_sink, clock, active_run
                )
            except (ProtocolError, KeyError, TypeError, ValueError) as exc:
                _send_line(
                    conn,
                    Message("ERROR", {"code": "protocol_violation", "message": str(exc)}),
                )
                return
    except (ConnectionError, OSError):
        pass
    finally:
        reader.close()


def _dispatch(
    conn,
    message: Message,
    received_at: float,
    dataset_root: Path,
    run_sink: RunStore,
    clock,
    active_run: Optional[str],
) -> Optional[str]:
    kind = message.kind
    if kind == "TIME_PROBE":
        _send_line(
            conn,
            Message(
                "TIME_REPLY",
                {"t1": float(message["t1"]), "t2": received_at, "t3": clock()},
            ),
        )
        return active_run
    if kind == "HELLO":
        if active_run is not None:
            raise ProtocolViolation("second HELLO in one session")
        run_sink.hello(dict(message.fields))
        _send_line(conn, Message("HELLO", {"run_id": message["run_id"], "ok": True}))
        return message["run_id"]
    if kind == "EVENT":
        label = message["label"]
        if not LABEL_PATTERN.match(label):
            raise ProtocolViolation(f"bad event label {label!r}")
        run_sink.event(message["run_id"], label, float(message["time_s"]))
        return active_run
    if kind == "RESULT":
        run_sink.result(message["run_id"], message["sample_id"], message["topk"])
        return active_run
    if kind == "FETCH":
        _serve_fetch(conn, dataset_root, str(message["path"]))
        return active_run
    if kind == "END_RUN":
        manifest = run_sink.end_run(message["run_id"])
        _send_line(
            conn,
            Message(
                "END_RUN",
                {"run_id": manifest.run_id, "batch_count": manifest.batch_count, "ok": True},
            ),
        )
        return None
    raise ProtocolViolation(f"unexpected message kind {kind!r}")


def _serve_fetch(conn, dataset_root: Path, rel_path: str) -> None:
    try:
        target = resolve_fetch_path(dataset_root, rel_path)
        data = target.read_bytes()
    except FetchOutsideRoot:
        _send_line(
            conn,
            Message("ERROR", {"code": "fetch_outside_root", "message": rel_path}),
        )
        return
    except OSError as exc:
        _send_line(conn, Message("ERROR", {"code": "fetch_failed", "message": str(exc)}))
        return
    seq = 0
    for start in range(0, len(data), CHUNK_SIZE):
        chunk = data[start : start + CHUNK_SIZE]
        _send_line(
            conn,
            Message(
                "DATA",
                {
                    "path": rel_path,
                    "seq": seq,
                    "data": base64.b64encode(chunk).decode("ascii"),
                },
            ),
        )
        seq += 1
    _send_line(conn, Message("DATA", {"path": rel_path, "seq": seq, "eof": True}))


class AgentSession:
    """Client half of the protocol.

    A session must sync its clock before announcing a run, and announces the
    run before emitting events; event timestamps are corrected onto the
    monitor timeline client-side.
    """

    def __init__(self, sock: socket.socket, *, clock: Callable[[], float] = time.time):
        self._sock = sock
        self._reader = sock.makefile("r", encoding="utf-8", newline="\n")
        self._clock = clock
        self.estimate: Optional[SyncEstimate] = None
        self.run_id: Optional[str] = None

    @classmethod
    def connect(
        cls,
        address: str | tuple[str, int],
        *,
        clock: Callable[[], float] = time.time,
        timeout: float = 10.0,
    ) -> "AgentSession":
        host, port = parse_address(address)
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ConnectFailed(f"cannot connect to {host}:{port}: {exc}") from exc
        return cls(sock, clock=clock)

    def _send(self, message: Message) -> None:
        self._sock.sendall(encode_message(message).encode("utf-8"))

    def _recv(self) -> Message:
        line = self._reader.readline()
        if not line:
            raise ServerError("connection closed by server", code="closed")
        message = decode_message(line)
        if message.kind == "ERROR":
            raise ServerError(message.get("message", ""), code=message.get("code", "error"))
        return message

    def _probe_once(self) -> tuple[float, float, float, float]:
        t1 = self._clock()
        self._send(Message("TIME_PROBE", {"t1": t1}))
        reply = self._recv()
        t4 = self._clock()
        if reply.kind != "TIME_REPLY" or reply["t1"] != t1:
            raise ProtocolViolation(f"unexpected probe reply {reply}")
        return t1, float(reply["t2"]), float(reply["t3"]), t4

    def sync(
        self,
        k: int = DEFAULT_PROBE_COUNT,
        *,
        dispersion_bound: float = DEFAULT_DISPERSION_BOUND_S,
    ) -> SyncEstimate:
        self.estimate = estimate_offset(self._probe_once, k, dispersion_bound=dispersion_bound)
        return self.estimate

    def hello(
        self,
        run_id: str,
        device: str,
        model: str,
        batch_count: int,
        batch_size: int,
    ) -> None:
        if self.estimate is None:
            self.sync()
        est = self.estimate
        self._send(
            Message(
                "HELLO",
                {
                    "run_id": run_id,
                    "device": device,
                    "model": model,
                    "batch_count": batch_count,
                    "batch_size": batch_size,
                    "clock_offset": est.offset,
                    "clock_rtt": est.rtt,
                    "clock_dispersion": est.dispersion,
                    "probe_count": est.probe_count,
                },
            )
        )
        ack = self._recv()
        if ack.kind != "HELLO" or not ack.get("ok"):
            raise ServerError(f"unexpected HELLO ack {ack}")
        self.run_id = run_id

    def event(self, label: str, t: Optional[float] = None) -> None:
        """Emit a labeled timestamp, corrected onto the monitor clock."""
        if self.run_id is None:
            raise ProtocolViolation("event before HELLO")
        raw = self._clock() if t is None else t
        corrected = correct_timestamp(raw, self.estimate.offset)
        self._send(Message("EVENT", {"run_id": self.run_id, "label": label, "time_s": corrected}))

    def result(self, sample_id: str, topk) -> None:
        if self.run_id is None:
            raise ProtocolViolation("result before HELLO")
        payload = [[int(i), float(s)] for i, s in topk]
        self._send(
            Message("RESULT", {"run_id": self.run_id, "sample_id": sample_id, "topk": payload})
        )

    def fetch(self, path: str) -> bytes:
        """Fetch a dataset file from the monitor, reassembling DATA chunks."""
        self._send(Message("FETCH", {"path": path}))
        parts: list[bytes] = []
        expected_seq = 0
        while True:
            message = self._recv()
            if message.kind != "DATA" or message["path"] != path:
                raise ProtocolViolation(f"unexpected fetch reply {message}")
            if message.get("eof"):
                return b"".join(parts)
            if message["seq"] != expected_seq:
                raise ProtocolViolation(
                    f"chunk {message['seq']} arrived, expected {expected_seq}"
                )
            parts.append(base64.b64decode(message["data"]))
            expected_seq += 1

    def end_run(self) -> int:
        """Finish the run; returns the server-side complete batch count."""
        if self.run_id is None:
            raise ProtocolViolation("END_RUN before HELLO")
        self._send(Message("END_RUN", {"run_id": self.run_id}))
        ack = self._recv()
        if ack.kind != "END_RUN" or not ack.get("ok"):
            raise ServerError(f"unexpected END_RUN ack {ack}")
        self.run_id = None
        return int(ack["batch_count"])

    def close(self) -> None:
        try:
            self._reader.close()
        finally:
            self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def agent_session(
    connect_address: str | tuple[str, int],
    *,
    clock: Callable[[], float] = time.time,
    timeout: float = 10.0,
) -> AgentSession:
    """Connect to a monitor and return a session handle."""
    return AgentSession.connect(connect_address, clock=clock, timeout=timeout)
