"""
Framed client/manufacturer session.

Wire frame::

    "STLS" | version u8 | kind u8 | layer_index u32 LE | payload_len u32 LE | payload | crc32 LE

The manufacturer pulls one layer at a time. While layer ``n`` prints,
layer ``n+1`` is already resident and the fetch of ``n+2`` starts only
after ``n`` has been deleted, so at most two layers ever sit on the
manufacturer side.
"""
from __future__ import annotations

import enum
import hashlib
import os
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

from .config import ConfigError, MachineLimits, MachineSpec, PrintConfig, parse_kv
from .gcode import GcodeProgram, footer_of, layer_stats, remove_redundant, validate
from .mesh import MeshError, RigidTransform, parse_stl
from .report import JobReport
from .sectioner import GuideSpec, SupportSpec, guide_footprint, prepare_mesh, section_job
from .slicer import SliceError, slice_slab

MAGIC = b"STLS"
VERSION = 1
HEADER = struct.Struct("<4sBBII")
HEADER_SIZE = HEADER.size  # 14
MAX_PAYLOAD = 64 * 1024 * 1024


class Kind(enum.IntEnum):
    SPEC_REQUEST = 1
    SPEC_REPLY = 2
    CONFIG = 3
    LAYER_REQUEST = 4
    LAYER_DATA = 5
    JOB_DONE = 6
    ABORT = 7
    ERROR = 8


LAYER_KINDS = (Kind.LAYER_REQUEST, Kind.LAYER_DATA)


@dataclass(frozen=True)
class Message:
    kind: Kind
    layer_index: int = 0
    payload: bytes = b""

    def text(self) -> str:
        return self.payload.decode("utf-8", "replace")


class FrameError(ValueError):
    """
    Malformed frame. ``reason`` is one of ``magic``, ``version``, ``kind``,
    ``length``, ``truncated``, ``crc``, ``index``. After a ``crc`` error
    read from a stream the stream is still in sync.
    """

    def __init__(self, reason: str, detail: str = "", kind: int | None = None, layer_index: int | None = None):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.kind = kind
        self.layer_index = layer_index


def frame_message(msg: Message) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(msg.payload)} bytes exceeds {MAX_PAYLOAD}")
    if not 0 <= msg.layer_index < 2**32:
        raise ValueError("layer index must fit in u32")
    head = HEADER.pack(MAGIC, VERSION, int(msg.kind), msg.layer_index, len(msg.payload))
    return head + msg.payload + struct.pack("<I", zlib.crc32(msg.payload))


def _check_header(head: bytes) -> tuple[Kind, int, int]:
    magic, version, kind, index, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise FrameError("magic", repr(magic))
    if version != VERSION:
        raise FrameError("version", str(version))
    try:
        kind = Kind(kind)
    except ValueError:
        raise FrameError("kind", str(kind)) from None
    if length > MAX_PAYLOAD:
        raise FrameError("length", f"{length} bytes exceeds {MAX_PAYLOAD}")
    if kind not in LAYER_KINDS and index != 0:
        raise FrameError("index", f"layer index {index} on {kind.name}")
    return kind, index, length


def _finish(kind, index, payload: bytes, crc: bytes) -> Message:
    if struct.unpack("<I", crc)[0] != zlib.crc32(payload):
        raise FrameError("crc", f"{kind.name}({index})", int(kind), index)
    return Message(kind, index, payload)


def parse_frame(data: bytes) -> Message:
    """Decode exactly one frame; trailing bytes are an error."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise FrameError("truncated", f"{len(data)} bytes")
    kind, index, length = _check_header(data[:HEADER_SIZE])
    end = HEADER_SIZE + length
    if len(data) < end + 4:
        raise FrameError("truncated", f"need {end + 4} bytes, have {len(data)}")
    if len(data) > end + 4:
        raise FrameError("length", f"{len(data) - end - 4} trailing bytes")
    return _finish(kind, index, data[HEADER_SIZE:end], data[end:end + 4])


class FrameStream:
    """Frames over a connected stream socket, with byte counters."""

    def __init__(self, sock: socket.socket, timeout: float | None = 30.0):
        self.sock = sock
        self.sock.settimeout(timeout)
        self.bytes_sent = 0
        self.bytes_received = 0
        self.sent: list[Message] = []
        self._lock = threading.Lock()

    def send(self, msg: Message) -> None:
        data = frame_message(msg)
        with self._lock:
            self.sock.sendall(data)
            self.bytes_sent += len(data)
            self.sent.append(msg)

    def send_raw(self, data: bytes) -> None:
        with self._lock:
            self.sock.sendall(data)
            self.bytes_sent += len(data)

    def _read(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            if not chunk:
                raise FrameError("truncated", f"connection closed after {len(buf)} of {n} bytes")
            buf += chunk
        self.bytes_received += n
        return bytes(buf)

    def recv(self) -> Message:
        kind, index, length = _check_header(self._read(HEADER_SIZE))
        payload = self._read(length)
        return _finish(kind, index, payload, self._read(4))

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


# retention ledger --------------------------------------------------------------

class RetentionError(RuntimeError):
    """Raised when an action would break the two-layer retention bound."""


@dataclass(frozen=True)
class LedgerEvent:
    seq: int
    time: float
    action: str  # store | delete | request
    artifact: str  # stl | gcode | layer
    index: int


class StorageLedger:
    """
    Owner of the manufacturer's working directory.

    Every artifact write and delete goes through here and is logged. At
    most ``limit`` artifacts of each kind may be resident, and layer
    ``n`` must be gone before layer ``n+limit`` is requested.
    """

    SUFFIX = {"stl": ".stl", "gcode": ".gcode"}

    def __init__(self, workdir, limit: int = 2):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.limit = limit
        self.events: list[LedgerEvent] = []
        self.resident: dict[str, set[int]] = {"stl": set(), "gcode": set()}
        self._lock = threading.Lock()

    def path(self, artifact: str, index: int) -> Path:
        return self.workdir / f"layer_{index}{self.SUFFIX[artifact]}"

    def _log(self, t, action, artifact, index):
        self.events.append(LedgerEvent(len(self.events), t, action, artifact, index))

    def request(self, index: int, t: float = 0.0) -> None:
        with self._lock:
            stale = [i for s in self.resident.values() for i in s if i <= index - self.limit]
            if stale:
                raise RetentionError(f"layer {min(stale)} still resident when requesting {index}")
            self._log(t, "request", "layer", index)

    def store(self, artifact: str, index: int, data: bytes, t: float = 0.0) -> Path:
        with self._lock:
            res = self.resident[artifact]
            if index not in res and len(res) >= self.limit:
                raise RetentionError(f"storing {artifact}({index}) would exceed {self.limit} resident")
            p = self.path(artifact, index)
            p.write_bytes(data)
            res.add(index)
            self._log(t, "store", artifact, index)
            return p

    def delete(self, artifact: str, index: int, t: float = 0.0) -> None:
        with self._lock:
            if index not in self.resident[artifact]:
                return
            self.path(artifact, index).unlink(missing_ok=True)
            self.resident[artifact].discard(index)
            self._log(t, "delete", artifact, index)

    def delete_layer(self, index: int, t: float = 0.0) -> None:
        for artifact in ("stl", "gcode"):
            self.delete(artifact, index, t)

    def purge(self, t: float = 0.0) -> None:
        for artifact in ("stl", "gcode"):
            for index in sorted(self.resident[artifact]):
                self.delete(artifact, index, t)
        # anything else that looks like a layer artifact is also removed
        for p in self.workdir.glob("layer_*"):
            p.unlink(missing_ok=True)

    def digest(self) -> str:
        """
        Fingerprint of the log in simulated-time order. Fetching and
        printing run on separate threads, so two runs may log concurrent
        events in a different sequence; their simulated times agree.
        """
        h = hashlib.sha256()
        for e in sorted(self.events, key=lambda e: (e.time, e.seq)):
            h.update(f"{e.time!r} {e.action} {e.artifact} {e.index}\n".encode())
        return h.hexdigest()


@dataclass
class RetentionAudit:
    max_resident: dict
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def replay(events, limit: int = 2) -> RetentionAudit:
    """Recompute residency from a ledger log and list every breach."""
    resident: dict[str, set[int]] = {"stl": set(), "gcode": set()}
    peak = {"stl": 0, "gcode": 0}
    deleted_at: dict[tuple[str, int], int] = {}
    bad = []
    for e in events:
        if e.action == "store":
            resident[e.artifact].add(e.index)
            peak[e.artifact] = max(peak[e.artifact], len(resident[e.artifact]))
            if len(resident[e.artifact]) > limit:
                bad.append(f"event {e.seq}: {len(resident[e.artifact])} {e.artifact} resident")
        elif e.action == "delete":
            resident[e.artifact].discard(e.index)
            deleted_at[(e.artifact, e.index)] = e.seq
        elif e.action == "request":
            old = e.index - limit
            if old >= 0:
                for a in ("stl", "gcode"):
                    if (a, old) not in deleted_at and any(
                        x.action == "store" and x.artifact == a and x.index == old for x in events[:e.seq]
                    ):
                        bad.append(f"event {e.seq}: request {e.index} before {a}({old}) deleted")
    return RetentionAudit(peak, bad)


# session errors and helpers --------------------------------------------------

class SessionAbort(Exception):
    def __init__(self, status: str, code: int, reason: str, notify: bool = True):
        super().__init__(reason)
        self.status, self.code, self.reason, self.notify = status, code, reason, notify


CLIENT_EXIT = {"ok": 0, "spec": 2, "transport": 3, "protocol": 3, "geometry": 4}
SERVER_EXIT = {"ok": 0, "config": 2, "protocol": 3, "transport": 3, "stl": 4, "validation": 5, "printer": 6}


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {text!r}")
    return host, int(port)


def _recv(stream: FrameStream) -> Message:
    try:
        return stream.recv()
    except FrameError as exc:
        if exc.reason == "truncated":
            raise SessionAbort("transport", 3, f"transport: {exc}", notify=False) from None
        raise
    except (socket.timeout, TimeoutError):
        raise SessionAbort("transport", 3, "transport: timed out", notify=False) from None
    except OSError as exc:
        raise SessionAbort("transport", 3, f"transport: {exc}", notify=False) from None


def _send(stream: FrameStream, msg: Message) -> None:
    try:
        stream.send(msg)
    except OSError as exc:
        raise SessionAbort("transport", 3, f"transport: {exc}", notify=False) from None


def _abort(stream: FrameStream, reason: str) -> None:
    try:
        stream.send(Message(Kind.ABORT, 0, reason.encode("utf-8")[:4096]))
    except (OSError, ValueError):
        pass


# client ---------------------------------------------------------------------------

def run_client(mesh, orientation: RigidTransform | None, config: PrintConfig, stream: FrameStream,
               supports: SupportSpec | None = SupportSpec(), guide: GuideSpec | None = GuideSpec()) -> JobReport:
    """
    Design-owner side of a job.

    Asks for the machine limits, checks the layer height, prepares and
    sections the mesh, sends the design configuration, then answers each
    ``LAYER_REQUEST(n)`` with that layer only, strictly in order.
    ``JOB_DONE`` follows the last layer; the session ends when the
    manufacturer confirms with its own ``JOB_DONE``.
    """
    report = JobReport("client")
    started = time.perf_counter()
    try:
        _run_client(mesh, orientation, config, stream, supports, guide, report)
        report.status = "done"
    except SessionAbort as exc:
        if exc.notify:
            _abort(stream, exc.reason)
        report.fail(exc.status, exc.code, exc.reason)
    except FrameError as exc:
        _abort(stream, f"protocol: bad frame ({exc})")
        report.fail("protocol", 3, f"protocol: bad frame ({exc})")
    report.bytes_sent = stream.bytes_sent
    report.bytes_received = stream.bytes_received
    report.wall_seconds = time.perf_counter() - started
    return report


def _run_client(mesh, orientation, config, stream, supports, guide, report: JobReport) -> None:
    _send(stream, Message(Kind.SPEC_REQUEST))
    msg = _recv(stream)
    if msg.kind in (Kind.ABORT, Kind.ERROR):
        raise SessionAbort("protocol", 3, f"manufacturer refused: {msg.text()}", notify=False)
    if msg.kind != Kind.SPEC_REPLY:
        raise SessionAbort("protocol", 3, f"protocol: expected SPEC_REPLY, got {msg.kind.name}")
    try:
        limits = MachineLimits.from_text(msg.text())
    except ConfigError as exc:
        raise SessionAbort("protocol", 3, f"protocol: {exc}") from None
    h = config.layer_height
    if not limits.accepts_layer_height(h):
        raise SessionAbort(
            "spec", 2,
            f"layer height {h:g} outside machine range [{limits.layer_height_min:g}, {limits.layer_height_max:g}]",
        )
    try:
        if isinstance(mesh, (str, os.PathLike)):
            mesh = parse_stl(Path(mesh).read_bytes())
        prepared = prepare_mesh(mesh, h, orientation, supports, guide, bed=(limits.bed_x, limits.bed_y))
        footprint = guide_footprint(guide, prepared.bounds) if guide is not None else prepared.bounds
        if (footprint.min[:2] < 0).any() or footprint.max[0] > limits.bed_x or footprint.max[1] > limits.bed_y:
            raise MeshError("job does not fit on the machine bed")
        if prepared.bounds.max[2] > limits.max_z:
            raise MeshError("job is taller than the machine build volume")
        slabs = section_job(prepared, h, guide, (limits.layer_height_min, limits.layer_height_max))
    except (OSError, MeshError, ValueError) as exc:
        raise SessionAbort("geometry", 4, f"geometry: {exc}") from None
    payloads = [s.to_stl() for s in slabs]
    k = len(payloads)
    report.layers_total = k
    _send(stream, Message(Kind.CONFIG, 0, config.to_text().encode("utf-8")))
    expected = 0
    done_sent = False
    trailing_seen = False
    resend_left = 1
    while True:
        msg = _recv(stream)
        if msg.kind == Kind.LAYER_REQUEST:
            i = msg.layer_index
            if i == expected and i < k:
                _send(stream, Message(Kind.LAYER_DATA, i, payloads[i]))
                report.layers_printed = i + 1
                rec = report.layer(i)
                rec.bytes = len(payloads[i])
                rec.z = slabs[i].z_lo
                expected += 1
                if expected == k:
                    _send(stream, Message(Kind.JOB_DONE))
                    done_sent = True
            elif i == expected - 1 and resend_left and not done_sent:
                resend_left -= 1
                _send(stream, Message(Kind.LAYER_DATA, i, payloads[i]))
            elif done_sent and i == k and not trailing_seen:
                trailing_seen = True
            elif done_sent and i == k - 1 and resend_left:
                resend_left -= 1
                _send(stream, Message(Kind.LAYER_DATA, i, payloads[i]))
            else:
                raise SessionAbort("protocol", 3, f"protocol: request for layer {i}, expected {expected}")
        elif msg.kind == Kind.JOB_DONE and done_sent:
            summary = parse_kv(msg.text()) if msg.payload else {}
            report.extruded_length = float(summary.get("extruded_length", 0.0))
            printed = int(summary.get("layers_printed", k))
            if printed != k:
                raise SessionAbort("protocol", 3, f"protocol: manufacturer printed {printed} of {k} layers",
                                   notify=False)
            return
        elif msg.kind in (Kind.ABORT, Kind.ERROR):
            raise SessionAbort("protocol", 3, f"manufacturer aborted: {msg.text()}", notify=False)
        else:
            raise SessionAbort("protocol", 3, f"protocol: unexpected {msg.kind.name}")


# manufacturer --------------------------------------------------------------------

@dataclass
class SessionState:
    phase: str = "AwaitConfig"
    z_offset: float = 0.0
    layers_printed: int = 0
    outstanding: int | None = None


@dataclass
class LayerJob:
    index: int
    program: GcodeProgram
    footer: GcodeProgram
    t_request: float
    t_available: float


class ManufacturerSession:
    """
    One job on the manufacturer side.

    Parameters
    ----------
    stream : FrameStream
      Connection to the client.
    machine : MachineSpec
      Private machine settings; only the public limits are ever sent.
    printer : DirectChannel or SocketChannel
      Line channel with ``send``, ``advance_to`` and ``clock``.
    workdir : path
      Sandbox for the resident layer files.
    pipeline_depth : {1, 2}
      2 prints layer n while n+1 is fetched; 1 fetches after printing.
    fetch_latency : float or callable
      Extra simulated seconds before a requested layer is usable.
    time_scale : float
      Simulated seconds charged per wall second spent fetching and
      slicing (0 keeps runs deterministic).
    """

    def __init__(self, stream: FrameStream, machine: MachineSpec, printer, workdir,
                 pipeline_depth: int = 2, fetch_latency=0.0, time_scale: float = 0.0):
        if pipeline_depth not in (1, 2):
            raise ValueError("pipeline depth must be 1 or 2")
        self.stream = stream
        self.machine = machine
        self.printer = printer
        self.ledger = StorageLedger(workdir)
        self.depth = pipeline_depth
        self.latency = fetch_latency if callable(fetch_latency) else (lambda n, v=float(fetch_latency): v)
        self.time_scale = time_scale
        self.state = SessionState()
        self.config: PrintConfig | None = None
        self.report = JobReport("manufacturer")
        self.done = False
        self.last_footer: GcodeProgram | None = None
        self.resent: set[int] = set()

    # fetching ----------------------------------------------------------------

    def _fetch(self, n: int, t_req: float) -> LayerJob | None:
        wall = time.perf_counter()
        self.state.outstanding = n
        self.ledger.request(n, t_req)
        _send(self.stream, Message(Kind.LAYER_REQUEST, n))
        while True:
            try:
                msg = _recv(self.stream)
            except FrameError as exc:
                if exc.reason == "crc" and n not in self.resent:
                    self.resent.add(n)
                    _send(self.stream, Message(Kind.LAYER_REQUEST, n))
                    continue
                raise SessionAbort("protocol", 3, f"protocol: bad frame ({exc})") from None
            if msg.kind == Kind.JOB_DONE and n in self.resent and not self.done:
                # the client finished before our re-request reached it
                self.done = True
                continue
            break
        self.state.outstanding = None
        if msg.kind == Kind.JOB_DONE:
            self.done = True
            return None
        if msg.kind in (Kind.ABORT, Kind.ERROR):
            raise SessionAbort("protocol", 3, f"client aborted: {msg.text()}", notify=False)
        if msg.kind != Kind.LAYER_DATA:
            raise SessionAbort("protocol", 3, f"protocol: unexpected {msg.kind.name} while fetching layer {n}")
        if msg.layer_index != n:
            raise SessionAbort("protocol", 3, f"protocol: got layer {msg.layer_index}, requested {n}")
        job = self._process(n, msg.payload, t_req)
        elapsed = time.perf_counter() - wall
        job.t_available = t_req + self.latency(n) + self.time_scale * elapsed
        return job

    def _process(self, n: int, payload: bytes, t_req: float) -> LayerJob:
        try:
            mesh = parse_stl(payload)
        except MeshError as exc:
            raise SessionAbort("stl", 4, f"layer {n}: bad STL ({exc})") from None
        self.ledger.store("stl", n, payload, t_req)
        config = self.config.at_layer(n)
        try:
            raw = slice_slab(mesh, config, self.machine, "first" if n == 0 else "intermediate")
        except (SliceError, MeshError) as exc:
            raise SessionAbort("stl", 4, f"layer {n}: cannot slice ({exc})") from None
        program = remove_redundant(raw, "first" if n == 0 else "intermediate")
        verdict = validate(program, self.machine)
        self.report.validation.append({"layer": n, "verdict": verdict.verdict, "violations": len(verdict.violations)})
        if not verdict.accepted:
            raise SessionAbort("validation", 5, f"layer {n}: {verdict.summary()}")
        self.ledger.store("gcode", n, program.to_text().encode("ascii"), t_req)
        stats = layer_stats(program)
        rec = self.report.layer(n)
        rec.bytes = len(payload)
        if stats:
            rec.z = stats[0].z
            rec.extruded_length = stats[0].extruded_length
            rec.guide_length = stats[0].guide_length
        return LayerJob(n, program, footer_of(raw), t_req, t_req)

    def _fetch_async(self, n: int, t_req: float):
        box: dict = {}

        def work():
            try:
                box["job"] = self._fetch(n, t_req)
            except BaseException as exc:  # handed to the printing thread
                box["error"] = exc

        th = threading.Thread(target=work, name=f"fetch-{n}", daemon=True)
        th.start()

        def join() -> LayerJob | None:
            th.join()
            if "error" in box:
                raise box["error"]
            return box["job"]

        return join

    # printing ------------------------------------------------------------------

    def _print(self, job: LayerJob) -> None:
        self.state.phase = f"Printing({job.index})"
        self.printer.advance_to(job.t_available)
        rec = self.report.layer(job.index)
        rec.t_request, rec.t_available = job.t_request, job.t_available
        rec.t_start = self.printer.clock
        self._stream_lines(job.program)
        rec.t_end = self.printer.clock
        self.state.layers_printed += 1
        self.state.z_offset = self.state.layers_printed * self.config.layer_height
        self.report.layers_printed = self.state.layers_printed
        self.last_footer = job.footer

    def _stream_lines(self, program: GcodeProgram) -> None:
        for line in program.lines():
            try:
                ack = self.printer.send(line)
            except OSError as exc:
                raise SessionAbort("printer", 6, f"printer channel: {exc}") from None
            if ack != "ok" and not ack.startswith("ok "):
                raise SessionAbort("printer", 6, f"printer rejected {line!r}: {ack}")

    def _safe_stop(self) -> None:
        for line in ("M104 S0", "M140 S0", "M107"):
            try:
                self.printer.send(line)
            except Exception:
                return

    # session -------------------------------------------------------------------

    def _handshake(self) -> None:
        msg = _recv(self.stream)
        if msg.kind != Kind.SPEC_REQUEST:
            raise SessionAbort("protocol", 3, f"protocol: expected SPEC_REQUEST, got {msg.kind.name}")
        _send(self.stream, Message(Kind.SPEC_REPLY, 0, self.machine.public().to_text().encode("utf-8")))
        msg = _recv(self.stream)
        if msg.kind in (Kind.ABORT, Kind.ERROR):
            raise SessionAbort("client-abort", 0, f"client aborted: {msg.text()}", notify=False)
        if msg.kind != Kind.CONFIG:
            raise SessionAbort("protocol", 3, f"protocol: expected CONFIG, got {msg.kind.name}")
        try:
            self.config = PrintConfig.from_text(msg.text())
        except ConfigError as exc:
            raise SessionAbort("config", 2, f"config: {exc}") from None
        if not self.machine.accepts_layer_height(self.config.layer_height):
            raise SessionAbort("config", 2, f"config: layer height {self.config.layer_height:g} outside machine range")

    def run(self) -> JobReport:
        started = time.perf_counter()
        try:
            self._handshake()
            self._run_layers()
            self.state.phase = "Done"
            self.report.status = "done"
        except SessionAbort as exc:
            self.state.phase = "Failed"
            if exc.notify:
                _abort(self.stream, exc.reason)
            if self.state.layers_printed:
                self._safe_stop()
            self.report.fail(exc.status, exc.code, exc.reason)
        except FrameError as exc:
            self.state.phase = "Failed"
            _abort(self.stream, f"protocol: bad frame ({exc})")
            self.report.fail("protocol", 3, f"protocol: bad frame ({exc})")
        except RetentionError as exc:
            self.state.phase = "Failed"
            _abort(self.stream, "manufacturer internal error")
            self.report.fail("retention", 3, str(exc))
        finally:
            self.ledger.purge(self._clock())
        self.report.layers_total = max(self.report.layers_total, self.report.layers_printed)
        self.report.bytes_sent = self.stream.bytes_sent
        self.report.bytes_received = self.stream.bytes_received
        self.report.ledger_digest = self.ledger.digest()
        self.report.max_resident = replay(self.ledger.events).max_resident
        self.report.extruded_length = sum(r.extruded_length + r.guide_length for r in self.report.layers)
        if hasattr(self.printer, "sim"):
            self.report.dwell = self.printer.sim.dwell_report().summary()
        self.report.wall_seconds = time.perf_counter() - started
        return self.report

    def _clock(self) -> float:
        try:
            return float(self.printer.clock)
        except Exception:
            return 0.0

    def _run_layers(self) -> None:
        self.state.phase = "Fetching(0)"
        current = self._fetch(0, self._clock())
        if current is None:
            raise SessionAbort("protocol", 3, "protocol: job has no layers")
        pending = None
        if self.depth == 2:
            # warm-up: both of the first two layers resident before printing
            nxt = self._fetch(1, self._clock()) if not self.done else None
            pending = (lambda j=nxt: j)
        while current is not None:
            self._print(current)
            n = current.index
            self.ledger.delete_layer(n, self._clock())
            if self.depth == 2:
                following = pending()
                if following is not None and not self.done:
                    self.state.phase = f"Fetching({n + 2})"
                    pending = self._fetch_async(n + 2, self._clock())
                else:
                    pending = (lambda: None)
                current = following
            else:
                self.state.phase = f"Fetching({n + 1})"
                current = None if self.done else self._fetch(n + 1, self._clock())
        if not self.done:
            # the trailing request returns JOB_DONE once all layers are out
            msg = _recv(self.stream)
            if msg.kind != Kind.JOB_DONE:
                raise SessionAbort("protocol", 3, f"protocol: expected JOB_DONE, got {msg.kind.name}")
        self.state.phase = "Draining"
        if self.last_footer is not None:
            self._stream_lines(self.last_footer)
        total = sum(r.extruded_length + r.guide_length for r in self.report.layers)
        summary = f"layers_printed={self.state.layers_printed}\nextruded_length={total!r}\n"
        _send(self.stream, Message(Kind.JOB_DONE, 0, summary.encode("utf-8")))
        self.report.layers_total = self.state.layers_printed


def run_manufacturer(stream: FrameStream, machine: MachineSpec, printer, workdir, **kwargs) -> JobReport:
    return ManufacturerSession(stream, machine, printer, workdir, **kwargs).run()


def local_pair(timeout: float | None = 30.0) -> tuple[FrameStream, FrameStream]:
    """Two connected frame streams over a socket pair (for in-process runs)."""
    a, b = socket.socketpair()
    return FrameStream(a, timeout), FrameStream(b, timeout)
