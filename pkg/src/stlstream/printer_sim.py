"""
Virtual FFF printer behind a line/acknowledgment channel.

Every line gets exactly one reply, ``ok`` or ``error:<detail>``. The
device keeps its own simulated clock: moves take distance / feed,
heater waits follow a first-order lag, and the host's idle time between
commands is recorded so nozzle dwell over the part can be measured.
"""
from __future__ import annotations

import copy
import json
import math
import socket
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import FORBIDDEN, MachineSpec
from .gcode import GcodeCommand, GcodeError, parse_line

MAX_LINE = 256
AMBIENT = 25.0


@dataclass(frozen=True)
class Segment:
    start: tuple[float, float]
    end: tuple[float, float]
    z: float
    e_delta: float

    @property
    def length(self) -> float:
        return math.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1])


@dataclass
class LayerRecord:
    z: float
    segments: list = field(default_factory=list)
    extruded_length: float = 0.0
    t_start: float = 0.0
    t_end: float = 0.0


@dataclass
class PrintRecord:
    layers: list = field(default_factory=list)

    @property
    def e_total(self) -> float:
        return sum(s.e_delta for layer in self.layers for s in layer.segments)

    @property
    def z_sequence(self) -> list[float]:
        return [layer.z for layer in self.layers]

    def export(self) -> str:
        """One JSON object per layer, for diffing two runs."""
        lines = []
        for i, layer in enumerate(self.layers):
            lines.append(json.dumps({
                "layer": i,
                "z": layer.z,
                "segments": len(layer.segments),
                "extruded_length": round(layer.extruded_length, 6),
                "e": round(sum(s.e_delta for s in layer.segments), 6),
                "t_start": round(layer.t_start, 6),
                "t_end": round(layer.t_end, 6),
            }, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass(frozen=True)
class BlobEvent:
    time: float
    idle: float
    position: tuple[float, float, float]
    layer: int


@dataclass
class DwellStats:
    max_idle: list = field(default_factory=list)
    over_threshold: list = field(default_factory=list)
    blob_events: list = field(default_factory=list)
    threshold: float = 0.5

    @property
    def blob_count(self) -> int:
        return len(self.blob_events)

    def summary(self) -> dict:
        return {
            "threshold": self.threshold,
            "blob_events": self.blob_count,
            "max_idle": round(max(self.max_idle, default=0.0), 6),
        }


@dataclass(frozen=True)
class PrinterState:
    position: tuple[float, float, float]
    e_accum: float
    hotend_temp: float
    bed_temp: float
    hotend_target: float
    bed_target: float
    fan: int
    homed: bool
    sim_clock: float


class PrinterError(Exception):
    """In-band rejection; the message becomes the ``error:`` reply."""


class PrinterSim:
    """
    Unbuffered virtual printer.

    Parameters
    ----------
    machine : MachineSpec
      Build volume, temperature limits, allow-list.
    tau : float
      Heater time constant in simulated seconds.
    dwell_threshold : float
      Idle time (s) above which a hot nozzle leaves a blob.
    """

    def __init__(self, machine: MachineSpec, tau: float = 10.0, dwell_threshold: float = 0.5):
        self.machine = machine
        self.tau = tau
        self.dwell_threshold = dwell_threshold
        self._lock = threading.Lock()
        self.reset()

    def reset(self) -> None:
        self.clock = 0.0
        self.host_time = 0.0
        self.pos = np.zeros(3)
        self.offset = np.zeros(3)
        self.e = 0.0  # physical filament position
        self.e_offset = 0.0
        self.e_accum = 0.0
        self.homed_axes: set[str] = set()
        self.relative = False
        self.relative_e = False
        self.feed = self.machine.print_feed
        self.hotend = AMBIENT
        self.bed = AMBIENT
        self.hotend_target = 0.0
        self.bed_target = 0.0
        self.fan = 0
        self.record = PrintRecord()
        self.idles: list[tuple[int, float]] = []
        self.blobs: list[BlobEvent] = []
        self.lines = 0
        self.acks: list[str] = []

    # host side -------------------------------------------------------------

    def advance_to(self, t: float) -> None:
        """Host time moves to ``t``; the next line arrives no earlier."""
        with self._lock:
            self.host_time = max(self.host_time, t)

    def send_line(self, text: str) -> str:
        with self._lock:
            ack = self._receive(text)
            self.acks.append(ack)
            return ack

    def _receive(self, text: str) -> str:
        self.lines += 1
        if len(text.encode("ascii", "replace")) > MAX_LINE:
            return "error:line too long"
        arrival = max(self.clock, self.host_time)
        idle = arrival - self.clock
        self._settle(idle)
        self.clock = arrival
        self.host_time = arrival
        layer = len(self.record.layers) - 1
        self.idles.append((layer, idle))
        if idle > self.dwell_threshold and self.hotend >= self.machine.extrude_min_temp and self.homed:
            self.blobs.append(BlobEvent(self.clock, idle, tuple(float(v) for v in self.pos), layer))
        try:
            item = parse_line(text.strip(), self.lines)
        except GcodeError as exc:
            return f"error:parse {exc}"
        if item is None or not isinstance(item, GcodeCommand):
            return "ok"
        try:
            extra = self.execute(item)
        except PrinterError as exc:
            return f"error:{exc}"
        self.host_time = self.clock
        return "ok" if not extra else f"ok {extra}"

    # device side ------------------------------------------------------------

    @property
    def homed(self) -> bool:
        return self.homed_axes == {"X", "Y", "Z"}

    @property
    def state(self) -> PrinterState:
        with self._lock:
            return PrinterState(
                tuple(float(v) for v in self.pos), self.e_accum, self.hotend, self.bed,
                self.hotend_target, self.bed_target, self.fan, self.homed, self.clock,
            )

    def snapshot(self) -> PrintRecord:
        with self._lock:
            return copy.deepcopy(self.record)

    def _settle(self, dt: float) -> None:
        if dt <= 0:
            return
        k = math.exp(-dt / self.tau)
        ht = self.hotend_target if self.hotend_target > 0 else AMBIENT
        bt = self.bed_target if self.bed_target > 0 else AMBIENT
        self.hotend = ht + (self.hotend - ht) * k
        self.bed = bt + (self.bed - bt) * k

    def _wait_for(self, attr: str, target: float) -> None:
        cur = getattr(self, attr)
        gap = abs(cur - target)
        if gap > 1.0:
            dt = self.tau * math.log(gap / 1.0)
            self._settle(dt)
            self.clock += dt

    def execute(self, c: GcodeCommand) -> str | None:
        code, m = c.code, self.machine
        if code in FORBIDDEN:
            raise PrinterError("forbidden")
        if code not in m.allowed_commands:
            raise PrinterError(f"unsupported {code}")
        s = c.get("S")
        if code in ("M104", "M109"):
            if s is None:
                raise PrinterError(f"{code} needs S")
            if s > m.max_hotend_temp or s < 0:
                raise PrinterError(f"hotend temperature {s:g} beyond limit {m.max_hotend_temp:g}")
            self.hotend_target = s
            if code == "M109" and s > 0:
                self._wait_for("hotend", s)
        elif code in ("M140", "M190"):
            if s is None:
                raise PrinterError(f"{code} needs S")
            if s > m.max_bed_temp or s < 0:
                raise PrinterError(f"bed temperature {s:g} beyond limit {m.max_bed_temp:g}")
            self.bed_target = s
            if code == "M190" and s > 0:
                self._wait_for("bed", s)
        elif code == "M106":
            v = 255.0 if s is None else s
            if not 0 <= v <= 255:
                raise PrinterError(f"fan speed {v:g} outside 0..255")
            self.fan = int(v)
        elif code == "M107":
            self.fan = 0
        elif code == "M105":
            return f"T:{self.hotend:.1f} /{self.hotend_target:.1f} B:{self.bed:.1f} /{self.bed_target:.1f}"
        elif code == "M84":
            self.homed_axes.clear()
        elif code == "G90":
            self.relative = False
        elif code == "G91":
            self.relative = True
        elif code == "M82":
            self.relative_e = False
        elif code == "M83":
            self.relative_e = True
        elif code == "G28":
            axes = [a for a in "XYZ" if a in c.params] or list("XYZ")
            for a in axes:
                i = "XYZ".index(a)
                self.pos[i] = 0.0
                self.offset[i] = 0.0
                self.homed_axes.add(a)
        elif code == "G92":
            for i, a in enumerate("XYZ"):
                v = c.get(a)
                if v is not None:
                    self.offset[i] = self.pos[i] - v
            v = c.get("E")
            if v is not None:
                self.e_offset = self.e - v
        elif code == "G4":
            dt = (c.get("P") or 0.0) / 1000.0 + (c.get("S") or 0.0)
            self._settle(dt)
            self.clock += dt
        elif code in ("G0", "G1"):
            self._move(c)
        return None

    def _move(self, c: GcodeCommand) -> None:
        f = c.get("F")
        if f is not None:
            if f <= 0:
                raise PrinterError("feed must be positive")
            self.feed = f
        target = self.pos.copy()
        for i, a in enumerate("XYZ"):
            v = c.get(a)
            if v is None:
                continue
            if a not in self.homed_axes:
                raise PrinterError("not homed")
            target[i] = self.pos[i] + v if self.relative else v + self.offset[i]
        e_new = self.e
        v = c.get("E")
        if v is not None:
            if not self.homed:
                raise PrinterError("not homed")
            e_new = self.e + v if (self.relative or self.relative_e) else v + self.e_offset
        limits = (self.machine.bed_x, self.machine.bed_y, self.machine.max_z)
        for i, a in enumerate("XYZ"):
            if not -1e-9 <= target[i] <= limits[i] + 1e-9:
                raise PrinterError(f"out of bounds {a}={target[i]:.3f}")
        de = e_new - self.e
        if de > 0 and self.hotend < self.machine.extrude_min_temp:
            raise PrinterError(f"cold extrusion at {self.hotend:.1f}C")
        dist = float(np.linalg.norm(target - self.pos))
        if dist == 0.0 and de != 0.0:
            dist = abs(de)
        dt = 60.0 * dist / self.feed
        t0 = self.clock
        self._settle(dt)
        self.clock += dt
        if de != 0.0:
            self._extrude(self.pos, target, de, t0)
        self.pos = target
        self.e = e_new
        self.e_accum += de

    def _extrude(self, a, b, de, t0) -> None:
        z = float(b[2])
        layers = self.record.layers
        if not layers or layers[-1].z != z:
            layers.append(LayerRecord(z, t_start=t0))
        layer = layers[-1]
        seg = Segment((float(a[0]), float(a[1])), (float(b[0]), float(b[1])), z, float(de))
        layer.segments.append(seg)
        if de > 0:
            layer.extruded_length += seg.length
        layer.t_end = self.clock

    def dwell_report(self) -> DwellStats:
        with self._lock:
            n = max(len(self.record.layers), 1)
            max_idle = [0.0] * n
            over = [0] * n
            for layer, idle in self.idles:
                if layer < 0:
                    continue  # before the first extrusion: nothing to ooze onto
                k = min(layer, n - 1)
                max_idle[k] = max(max_idle[k], idle)
                if idle > self.dwell_threshold:
                    over[k] += 1
            return DwellStats(max_idle, over, list(self.blobs), self.dwell_threshold)


# channels ---------------------------------------------------------------------

class DirectChannel:
    """In-process channel to a ``PrinterSim``."""

    def __init__(self, sim: PrinterSim):
        self.sim = sim

    @property
    def clock(self) -> float:
        return self.sim.clock

    def advance_to(self, t: float) -> None:
        self.sim.advance_to(t)

    def send(self, line: str) -> str:
        return self.sim.send_line(line)

    def close(self) -> None:
        pass


class SocketChannel:
    """
    Line channel over a stream socket to ``serve_printer``.

    Host idle is forwarded as a ``;@advance <t>`` meta line, which is
    acknowledged like any other line. ``;@clock`` asks for the device clock.
    """

    def __init__(self, address: tuple[str, int], timeout: float = 30.0):
        self.sock = socket.create_connection(address, timeout=timeout)
        self.file = self.sock.makefile("rwb")

    def _ask(self, line: str) -> str:
        self.file.write(line.encode("ascii") + b"\n")
        self.file.flush()
        reply = self.file.readline()
        if not reply:
            raise ConnectionError("printer closed the channel")
        return reply.decode("ascii").rstrip("\n")

    @property
    def clock(self) -> float:
        return float(self._ask(";@clock").split()[1])

    def advance_to(self, t: float) -> None:
        self._ask(f";@advance {t!r}")

    def send(self, line: str) -> str:
        return self._ask(line)

    def close(self) -> None:
        try:
            self.file.close()
        finally:
            self.sock.close()


def serve_printer(sim: PrinterSim, conn: socket.socket) -> None:
    """Answer one host connection line by line until it closes."""
    with conn, conn.makefile("rwb") as f:
        for raw in f:
            line = raw.decode("ascii", "replace").rstrip("\r\n")
            if line.startswith(";@advance"):
                sim.advance_to(float(line.split()[1]))
                reply = "ok"
            elif line.startswith(";@clock"):
                reply = f"ok {sim.clock!r}"
            else:
                reply = sim.send_line(line)
            f.write(reply.encode("ascii") + b"\n")
            f.flush()


def state_dict(sim: PrinterSim) -> dict:
    return asdict(sim.state)
