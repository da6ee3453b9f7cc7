"""Client side of the monitor's line protocol.

Implemented against docs/protocol.md in the monitor repo: one TCP
connection, one JSON object per ``\\n``-terminated UTF-8 line, a ``kind``
field naming the message. This module is deliberately standalone -- the
agent talks to the monitor only over the wire.
"""

from __future__ import annotations

import base64
import json
import socket
import time
from dataclasses import dataclass
from typing import Callable, Optional


class WireError(Exception):
    pass


class ConnectFailed(WireError):
    pass


class MonitorError(WireError):
    """The monitor answered with an ERROR message."""

    def __init__(self, message: str, code: str = "error"):
        super().__init__(f"{code}: {message}")
        self.code = code


class FetchError(WireError):
    pass


@dataclass(frozen=True)
class ClockSync:
    """Offset is the agent clock minus the monitor clock, in seconds."""

    offset: float
    rtt: float
    probe_count: int
    dispersion: float


def corrected(t: float, offset: float) -> float:
    """Shift a local timestamp onto the monitor clock, exact in microseconds."""
    return (round(t * 1e6) - round(offset * 1e6)) / 1e6


class MonitorClient:
    """One session against the monitor: sync, announce, emit, fetch, finish."""

    def __init__(self, sock: socket.socket, clock: Callable[[], float] = time.time):
        self._sock = sock
        self._reader = sock.makefile("r", encoding="utf-8", newline="\n")
        self._clock = clock
        self.sync_state: Optional[ClockSync] = None
        self.run_id: Optional[str] = None

    @classmethod
    def connect(
        cls,
        address: str,
        timeout: float = 10.0,
        clock: Callable[[], float] = time.time,
    ) -> "MonitorClient":
        host, _, port = address.rpartition(":")
        if not host or not port.isdigit():
            raise ConnectFailed(f"expected host:port, got {address!r}")
        try:
            sock = socket.create_connection((host, int(port)), timeout=timeout)
        except OSError as exc:
            raise ConnectFailed(f"cannot reach monitor at {address}: {exc}") from exc
        return cls(sock, clock=clock)

    def send(self, kind: str, **fields) -> None:
        line = json.dumps({"kind": kind, **fields}) + "\n"
        self._sock.sendall(line.encode("utf-8"))

    def recv(self) -> dict:
        line = self._reader.readline()
        if not line:
            raise WireError("monitor closed the connection")
        message = json.loads(line)
        if message.get("kind") == "ERROR":
            raise MonitorError(message.get("message", ""), message.get("code", "error"))
        return message

    # -- clock sync ----------------------------------------------------------

    def _probe(self) -> tuple[float, float, float, float]:
        t1 = self._clock()
        self.send("TIME_PROBE", t1=t1)
        reply = self.recv()
        t4 = self._clock()
        if reply.get("kind") != "TIME_REPLY" or reply.get("t1") != t1:
            raise WireError(f"unexpected probe reply: {reply}")
        return t1, float(reply["t2"]), float(reply["t3"]), t4

    def sync(self, probes: int = 8) -> ClockSync:
        """Minimum-round-trip filter over ``probes`` exchanges."""
        if probes < 3:
            raise ValueError("need at least 3 probes")
        offsets = []
        best = None
        for _ in range(probes):
            t1, t2, t3, t4 = self._probe()
            rtt = (t4 - t1) - (t3 - t2)
            offset = ((t1 - t2) + (t4 - t3)) / 2
            offsets.append(offset)
            if best is None or rtt < best[0]:
                best = (rtt, offset)
        self.sync_state = ClockSync(
            offset=best[1],
            rtt=best[0],
            probe_count=probes,
            dispersion=max(offsets) - min(offsets),
        )
        return self.sync_state

    # -- run lifecycle ---------------------------------------------------------

    def hello(
        self,
        run_id: str,
        device: str,
        model: str,
        batch_count: int,
        batch_size: int,
    ) -> None:
        if self.sync_state is None:
            self.sync()
        s = self.sync_state
        self.send(
            "HELLO",
            run_id=run_id,
            device=device,
            model=model,
            batch_count=batch_count,
            batch_size=batch_size,
            clock_offset=s.offset,
            clock_rtt=s.rtt,
            clock_dispersion=s.dispersion,
            probe_count=s.probe_count,
        )
        ack = self.recv()
        if ack.get("kind") != "HELLO" or not ack.get("ok"):
            raise WireError(f"HELLO not acknowledged: {ack}")
        self.run_id = run_id

    def event(self, label: str) -> None:
        """Emit one labeled timestamp, stamped now, corrected to monitor time."""
        if self.run_id is None:
            raise WireError("event before HELLO")
        t = corrected(self._clock(), self.sync_state.offset)
        self.send("EVENT", run_id=self.run_id, label=label, time_s=t)

    def result(self, sample_id: str, topk) -> None:
        if self.run_id is None:
            raise WireError("result before HELLO")
        self.send(
            "RESULT",
            run_id=self.run_id,
            sample_id=sample_id,
            topk=[[int(i), float(s)] for i, s in topk],
        )

    def fetch(self, path: str) -> bytes:
        """Pull one dataset file from the monitor."""
        self.send("FETCH", path=path)
        parts = []
        seq = 0
        while True:
            try:
                message = self.recv()
            except MonitorError as exc:
                raise FetchError(str(exc)) from exc
            if message.get("kind") != "DATA" or message.get("path") != path:
                raise WireError(f"unexpected fetch reply: {message}")
            if message.get("eof"):
                return b"".join(parts)
            if message.get("seq") != seq:
                raise WireError(f"chunk {message.get('seq')} out of order, wanted {seq}")
            parts.append(base64.b64decode(message["data"]))
            seq += 1

    def end_run(self) -> int:
        if self.run_id is None:
            raise WireError("END_RUN before HELLO")
        self.send("END_RUN", run_id=self.run_id)
        ack = self.recv()
        if ack.get("kind") != "END_RUN" or not ack.get("ok"):
            raise WireError(f"END_RUN not acknowledged: {ack}")
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
