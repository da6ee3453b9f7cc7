"""Modbus-RTU client for HM310P-class bench power supplies, plus a bit-exact
in-process simulator so every test can run without hardware.

Only two function codes are needed: 0x03 (read holding registers) and 0x06
(write single register).  The CRC is CRC-16/MODBUS (reflected poly 0xA001,
init 0xFFFF) over unit id, function and payload, transmitted low byte first.

Register addresses come from community documentation, not a vendor spec, so
the whole map is a named, overridable profile.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable, Protocol

from .model import PowerSample


class PsuError(Exception):
    pass


class Timeout(PsuError):
    pass


class CrcMismatch(PsuError):
    pass


class ExceptionResponse(PsuError):
    """The device answered with function | 0x80 and an exception code."""

    def __init__(self, code: int):
        super().__init__(f"modbus exception code {code}")
        self.code = code


class ProtocolViolation(PsuError):
    pass


class PortOpenFailed(PsuError):
    pass


READ_HOLDING = 0x03
WRITE_SINGLE = 0x06

_CRC_TABLE: list[int] = []
for _byte in range(256):
    _crc = _byte
    for _ in range(8):
        _crc = (_crc >> 1) ^ 0xA001 if _crc & 1 else _crc >> 1
    _CRC_TABLE.append(_crc)


def crc16_modbus(data: bytes) -> int:
    """CRC-16/MODBUS over ``data``; 0xFFFF for empty input."""
    crc = 0xFFFF
    for byte in data:
        crc = (crc >> 8) ^ _CRC_TABLE[(crc ^ byte) & 0xFF]
    return crc


@dataclass(frozen=True)
class ModbusFrame:
    """One RTU frame; ``crc`` covers unit_id, function and payload."""

    unit_id: int
    function: int
    payload: bytes
    crc: int

    def __post_init__(self):
        if not 0 <= self.unit_id <= 0xFF:
            raise ValueError(f"unit_id out of range: {self.unit_id}")
        if not 0 <= self.function <= 0xFF:
            raise ValueError(f"function out of range: {self.function}")
        if not 0 <= self.crc <= 0xFFFF:
            raise ValueError(f"crc out of range: {self.crc}")

    @classmethod
    def build(cls, unit_id: int, function: int, payload: bytes) -> "ModbusFrame":
        crc = crc16_modbus(bytes([unit_id, function]) + payload)
        return cls(unit_id, function, payload, crc)


def encode_frame(frame: ModbusFrame) -> bytes:
    body = bytes([frame.unit_id, frame.function]) + frame.payload
    return body + bytes([frame.crc & 0xFF, frame.crc >> 8])


def decode_frame(raw: bytes) -> ModbusFrame:
    """Split a raw frame and verify its CRC; raises CrcMismatch on corruption."""
    if len(raw) < 4:
        raise ProtocolViolation(f"frame too short: {len(raw)} bytes")
    body, crc_bytes = raw[:-2], raw[-2:]
    crc = crc_bytes[0] | (crc_bytes[1] << 8)
    if crc16_modbus(body) != crc:
        raise CrcMismatch(f"bad crc on {raw.hex(' ')}")
    return ModbusFrame(body[0], body[1], body[2:], crc)


@dataclass(frozen=True)
class RegisterMap:
    """Addresses and decimal scale divisors for one PSU model."""

    voltage_reg: int
    current_reg: int
    power_reg_hi: int
    power_reg_lo: int
    output_enable_reg: int
    set_voltage_reg: int
    set_current_reg: int
    voltage_scale: float
    current_scale: float
    power_scale: float

    def __post_init__(self):
        for name in (
            "voltage_reg",
            "current_reg",
            "power_reg_hi",
            "power_reg_lo",
            "output_enable_reg",
            "set_voltage_reg",
            "set_current_reg",
        ):
            addr = getattr(self, name)
            if not 0 <= addr <= 0xFFFF:
                raise ValueError(f"{name} must fit in 16 bits, got {addr:#x}")
        for name in ("voltage_scale", "current_scale", "power_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# Community-documented HM310P map.  Power is a 32-bit value split across two
# registers, high word first.
HM310P_COMMUNITY = RegisterMap(
    voltage_reg=0x0010,
    current_reg=0x0011,
    power_reg_hi=0x0012,
    power_reg_lo=0x0013,
    output_enable_reg=0x0001,
    set_voltage_reg=0x0030,
    set_current_reg=0x0031,
    voltage_scale=100,
    current_scale=1000,
    power_scale=1000,
)

PROFILES: dict[str, RegisterMap] = {"hm310p-community": HM310P_COMMUNITY}

_REGISTER_KEYS = (
    "voltage_reg",
    "current_reg",
    "power_reg_hi",
    "power_reg_lo",
    "output_enable_reg",
    "set_voltage_reg",
    "set_current_reg",
    "voltage_scale",
    "current_scale",
    "power_scale",
)


def parse_register_profile(text: str, base: RegisterMap | None = None) -> RegisterMap:
    """Parse the key/value profile format (``name = value``, ``#`` comments).

    Addresses accept 0x-prefixed hex.  Keys missing from the file fall back to
    ``base`` (default: the hm310p-community profile).
    """
    values = dict((base or HM310P_COMMUNITY).__dict__)
    for line_no, raw in enumerate(text.split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"profile line {line_no}: expected 'key = value'")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _REGISTER_KEYS:
            raise ValueError(f"profile line {line_no}: unknown key {key!r}")
        values[key] = float(value) if key.endswith("_scale") else int(value, 0)
    return RegisterMap(**values)


class Port(Protocol):
    """Byte stream to a PSU.  ``read`` may return fewer bytes on timeout."""

    def write(self, data: bytes) -> None: ...

    def read(self, n: int, timeout: float) -> bytes: ...

    def close(self) -> None: ...


class SerialPort:
    """Raw serial device opened via termios; 9600 8N1 by default."""

    BAUD_CONSTANTS = {9600: "B9600", 19200: "B19200", 38400: "B38400", 115200: "B115200"}

    def __init__(self, path: str, baudrate: int = 9600):
        import os
        import termios

        if baudrate not in self.BAUD_CONSTANTS:
            raise PortOpenFailed(f"unsupported baud rate {baudrate}")
        try:
            self._fd = os.open(path, os.O_RDWR | os.O_NOCTTY | os.O_NONBLOCK)
        except OSError as exc:
            raise PortOpenFailed(f"cannot open {path}: {exc}") from exc
        baud = getattr(termios, self.BAUD_CONSTANTS[baudrate])
        attrs = termios.tcgetattr(self._fd)
        attrs[0] = 0  # iflag: raw input
        attrs[1] = 0  # oflag: raw output
        attrs[2] = termios.CS8 | termios.CREAD | termios.CLOCAL  # cflag: 8N1
        attrs[3] = 0  # lflag: no echo/canonical
        attrs[4] = baud
        attrs[5] = baud
        termios.tcsetattr(self._fd, termios.TCSANOW, attrs)

    def write(self, data: bytes) -> None:
        import os

        os.write(self._fd, data)

    def read(self, n: int, timeout: float) -> bytes:
        import os
        import select

        out = b""
        deadline = time.monotonic() + timeout
        while len(out) < n:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            ready, _, _ = select.select([self._fd], [], [], remaining)
            if not ready:
                break
            out += os.read(self._fd, n - len(out))
        return out

    def close(self) -> None:
        import os

        os.close(self._fd)


def _transact(
    port: Port,
    request: ModbusFrame,
    response_len: int,
    timeout: float,
    retries: int,
) -> ModbusFrame:
    """Send one request and read its response, retrying transient failures.

    ``response_len`` is the expected normal-response length including CRC;
    exception responses are always 5 bytes and detected from the function
    byte.
    """
    last: PsuError = Timeout("no attempt made")
    for _ in range(retries + 1):
        port.write(encode_frame(request))
        try:
            head = _read_exact(port, 2, timeout)
            if head[1] & 0x80:
                rest = _read_exact(port, 3, timeout)
                frame = decode_frame(head + rest)
                raise ExceptionResponse(frame.payload[0])
            rest = _read_exact(port, response_len - 2, timeout)
            return decode_frame(head + rest)
        except (Timeout, CrcMismatch) as exc:
            last = exc
    raise last


def _read_exact(port: Port, n: int, timeout: float) -> bytes:
    data = port.read(n, timeout)
    if len(data) < n:
        raise Timeout(f"expected {n} bytes, got {len(data)}")
    return data


def read_registers(
    port: Port,
    address: int,
    count: int,
    *,
    unit_id: int = 1,
    timeout: float = 0.2,
    retries: int = 2,
) -> list[int]:
    """Read ``count`` holding registers starting at ``address``."""
    payload = address.to_bytes(2, "big") + count.to_bytes(2, "big")
    request = ModbusFrame.build(unit_id, READ_HOLDING, payload)
    response = _transact(port, request, 5 + 2 * count, timeout, retries)
    if response.unit_id != unit_id or response.function != READ_HOLDING:
        raise ProtocolViolation(f"unexpected response header {response}")
    if response.payload[0] != 2 * count:
        raise ProtocolViolation(f"byte count {response.payload[0]} != {2 * count}")
    data = response.payload[1:]
    return [int.from_bytes(data[2 * i : 2 * i + 2], "big") for i in range(count)]


def write_register(
    port: Port,
    address: int,
    value: int,
    *,
    unit_id: int = 1,
    timeout: float = 0.2,
    retries: int = 2,
) -> None:
    """Write a single holding register; the device must echo the request."""
    payload = address.to_bytes(2, "big") + value.to_bytes(2, "big")
    request = ModbusFrame.build(unit_id, WRITE_SINGLE, payload)
    response = _transact(port, request, 8, timeout, retries)
    if response != request:
        raise ProtocolViolation(f"write echo mismatch: {response} != {request}")


def read_measurements(
    port: Port,
    register_map: RegisterMap = HM310P_COMMUNITY,
    *,
    unit_id: int = 1,
    timeout: float = 0.2,
    retries: int = 2,
    clock: Callable[[], float] = time.time,
) -> PowerSample:
    """Read voltage, current and power; the sample is stamped at request time.

    Power comes from the device's own power registers (32-bit, high word
    first), never computed as V*I here.  When the four measurement registers
    sit close together (as in the hm310p-community map) they are fetched in a
    single request.
    """
    stamp = clock()
    kwargs = dict(unit_id=unit_id, timeout=timeout, retries=retries)
    rm = register_map
    addresses = (rm.voltage_reg, rm.current_reg, rm.power_reg_hi, rm.power_reg_lo)
    base, span = min(addresses), max(addresses) - min(addresses) + 1
    if span <= 8:
        block = read_registers(port, base, span, **kwargs)
        voltage, current = block[rm.voltage_reg - base], block[rm.current_reg - base]
        hi, lo = block[rm.power_reg_hi - base], block[rm.power_reg_lo - base]
    else:
        voltage = read_registers(port, rm.voltage_reg, 1, **kwargs)[0]
        current = read_registers(port, rm.current_reg, 1, **kwargs)[0]
        hi = read_registers(port, rm.power_reg_hi, 1, **kwargs)[0]
        lo = read_registers(port, rm.power_reg_lo, 1, **kwargs)[0]
    return PowerSample(
        t=stamp,
        current=current / rm.current_scale,
        voltage=voltage / rm.voltage_scale,
        power=((hi << 16) | lo) / rm.power_scale,
    )


def set_output(
    port: Port,
    register_map: RegisterMap = HM310P_COMMUNITY,
    on: bool = True,
    *,
    unit_id: int = 1,
    timeout: float = 0.2,
    retries: int = 2,
) -> None:
    write_register(
        port,
        register_map.output_enable_reg,
        1 if on else 0,
        unit_id=unit_id,
        timeout=timeout,
        retries=retries,
    )


Waveform = Callable[[float], tuple[float, float]]


def constant_power(watts: float, volts: float = 5.0) -> Waveform:
    amps = watts / volts
    return lambda t: (volts, amps)


def square_power(low_w: float, high_w: float, period: float, volts: float = 5.0) -> Waveform:
    """Square wave: ``low_w`` on the first half of each period, then ``high_w``."""

    def wave(t: float) -> tuple[float, float]:
        watts = low_w if (t % period) < period / 2 else high_w
        return volts, watts / volts

    return wave


class SimulatedPsu:
    """In-process PSU answering Modbus frames bit-exactly like a real device.

    Measurement registers are derived from ``waveform(clock())`` at the moment
    a read request arrives, so repeated reads at the same simulated time are
    identical.  Test knobs: ``drop_every`` silently swallows every n-th
    request, ``force_exception`` answers everything with an exception code,
    ``corrupt_next_response`` flips one byte of the next response.
    """

    def __init__(
        self,
        waveform: Waveform,
        *,
        register_map: RegisterMap = HM310P_COMMUNITY,
        unit_id: int = 1,
        clock: Callable[[], float] = time.time,
        response_latency: float = 0.0,
        drop_every: int | None = None,
        force_exception: int | None = None,
    ):
        self.waveform = waveform
        self.register_map = register_map
        self.unit_id = unit_id
        self.clock = clock
        self.response_latency = response_latency
        self.drop_every = drop_every
        self.force_exception = force_exception
        self.corrupt_next_response = False
        self.output_enabled = True
        self.registers: dict[int, int] = {}
        self.request_count = 0
        self._rx = bytearray()
        self._lock = threading.Lock()

    # -- Port interface -----------------------------------------------------

    def write(self, data: bytes) -> None:
        with self._lock:
            self.request_count += 1
            if self.drop_every and self.request_count % self.drop_every == 0:
                return
            try:
                frame = decode_frame(bytes(data))
            except (CrcMismatch, ProtocolViolation):
                return  # a real device stays silent on a corrupt request
            if frame.unit_id != self.unit_id:
                return
            response = self._handle(frame)
            if response is None:
                return
            raw = encode_frame(response)
            if self.corrupt_next_response:
                self.corrupt_next_response = False
                raw = raw[:-1] + bytes([raw[-1] ^ 0xFF])
            self._rx.extend(raw)

    def read(self, n: int, timeout: float) -> bytes:
        if self.response_latency > 0:
            time.sleep(self.response_latency)
        with self._lock:
            out = bytes(self._rx[:n])
            del self._rx[:n]
            return out

    def close(self) -> None:
        pass

    # -- request handling ---------------------------------------------------

    def _exception(self, function: int, code: int) -> ModbusFrame:
        return ModbusFrame.build(self.unit_id, function | 0x80, bytes([code]))

    def _handle(self, frame: ModbusFrame) -> ModbusFrame | None:
        if self.force_exception is not None:
            return self._exception(frame.function, self.force_exception)
        if frame.function == READ_HOLDING:
            if len(frame.payload) != 4:
                return self._exception(frame.function, 0x03)
            address = int.from_bytes(frame.payload[:2], "big")
            count = int.from_bytes(frame.payload[2:], "big")
            if not 1 <= count <= 125:
                return self._exception(frame.function, 0x03)
            image = self._register_image()
            data = b"".join(
                image.get(address + i, self.registers.get(address + i, 0)).to_bytes(2, "big")
                for i in range(count)
            )
            return ModbusFrame.build(
                self.unit_id, READ_HOLDING, bytes([2 * count]) + data
            )
        if frame.function == WRITE_SINGLE:
            if len(frame.payload) != 4:
                return self._exception(frame.function, 0x03)
            address = int.from_bytes(frame.payload[:2], "big")
            value = int.from_bytes(frame.payload[2:], "big")
            self.registers[address] = value
            if address == self.register_map.output_enable_reg:
                self.output_enabled = bool(value)
            return frame  # write-single echoes the request
        return self._exception(frame.function, 0x01)

    def _register_image(self) -> dict[int, int]:
        """Measurement registers at the current simulated instant."""
        if self.output_enabled:
            volts, amps = self.waveform(self.clock())
        else:
            volts, amps = 0.0, 0.0
        rm = self.register_map
        raw_power = round(volts * amps * rm.power_scale)
        return {
            rm.voltage_reg: round(volts * rm.voltage_scale) & 0xFFFF,
            rm.current_reg: round(amps * rm.current_scale) & 0xFFFF,
            rm.power_reg_hi: (raw_power >> 16) & 0xFFFF,
            rm.power_reg_lo: raw_power & 0xFFFF,
            rm.output_enable_reg: 1 if self.output_enabled else 0,
        }


def simulate_psu(waveform: Waveform, **kwargs) -> SimulatedPsu:
    """Create a simulated port for the given (volts, amps) waveform."""
    return SimulatedPsu(waveform, **kwargs)


def parse_sim_spec(spec: str, *, clock: Callable[[], float] = time.time) -> SimulatedPsu:
    """Build a simulator from a CLI spec: ``sim:const:2.5`` (watts) or
    ``sim:square:low,high,period``."""
    parts = spec.split(":")
    if len(parts) != 3 or parts[0] != "sim":
        raise PortOpenFailed(f"bad simulator spec {spec!r}")
    kind, args = parts[1], parts[2]
    if kind == "const":
        return SimulatedPsu(constant_power(float(args)), clock=clock)
    if kind == "square":
        low, high, period = (float(a) for a in args.split(","))
        return SimulatedPsu(square_power(low, high, period), clock=clock)
    raise PortOpenFailed(f"unknown simulator kind {kind!r}")


def open_port(path_or_spec: str, *, baudrate: int = 9600, clock: Callable[[], float] = time.time) -> Port:
    """Open a PSU port: a ``sim:`` spec or a serial device path."""
    if path_or_spec.startswith("sim:"):
        return parse_sim_spec(path_or_spec, clock=clock)
    return SerialPort(path_or_spec, baudrate=baudrate)
