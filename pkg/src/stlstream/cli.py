"""
Command-line entry points: ``stream-client``, ``stream-server`` and
``monoslice``. Each ``*_main(argv)`` returns the process exit code.
"""
from __future__ import annotations

import argparse
import logging
import socket
import sys
import tempfile
from pathlib import Path

from .config import ConfigError, MachineSpec, PrintConfig
from .mesh import MeshError, RigidTransform, parse_stl
from .printer_sim import DirectChannel, PrinterSim, SocketChannel
from .protocol import FrameStream, parse_endpoint, run_client, run_manufacturer
from .report import JobReport
from .sectioner import SupportSpec, prepare_mesh
from .slicer import SliceError, slice_mesh

log = logging.getLogger("stlstream")


def _rotation(text: str) -> RigidTransform:
    try:
        x, y, z = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("--rotate takes three comma-separated angles in degrees") from None
    return RigidTransform.from_euler(x, y, z)


def _die(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# stream-client -------------------------------------------------------------------

def client_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stream-client", description="Stream a design layer by layer to a manufacturer.")
    p.add_argument("--stl", required=True, type=Path)
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--connect", required=True, help="manufacturer host:port")
    p.add_argument("--rotate", type=_rotation, default=None, metavar="X,Y,Z")
    p.add_argument("--no-supports", action="store_true")
    p.add_argument("--report", type=Path)
    return p


def client_main(argv=None) -> int:
    args = client_parser().parse_args(argv)
    try:
        config = PrintConfig.from_text(args.config.read_text(encoding="utf-8"))
    except (OSError, ConfigError) as exc:
        return _die(2, f"config: {exc}")
    try:
        mesh = parse_stl(args.stl.read_bytes())
    except (OSError, MeshError) as exc:
        return _die(4, f"geometry: {exc}")
    try:
        sock = socket.create_connection(parse_endpoint(args.connect), timeout=30)
    except (OSError, ValueError) as exc:
        return _die(3, f"transport: {exc}")
    stream = FrameStream(sock)
    try:
        report = run_client(mesh, args.rotate, config, stream, None if args.no_supports else SupportSpec())
    finally:
        stream.close()
    if args.report:
        report.write(args.report)
    if not report.ok:
        return _die(report.exit_code, report.error or report.status)
    return 0


# stream-server --------------------------------------------------------------------

def server_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stream-server", description="Print streamed layers on a local printer.")
    p.add_argument("--machine", required=True, type=Path)
    p.add_argument("--listen", required=True, help="host:port to accept clients on")
    p.add_argument("--printer", required=True, help="'sim' or 'pipe:HOST:PORT'")
    p.add_argument("--workdir", type=Path)
    p.add_argument("--pipeline-depth", type=int, choices=(1, 2), default=2)
    p.add_argument("--report", type=Path)
    return p


def server_main(argv=None, max_jobs: int | None = None, ready=None) -> int:
    """
    Serve jobs one connection at a time. ``max_jobs`` stops the loop
    (tests); ``ready`` is called with the bound address once listening.
    """
    args = server_parser().parse_args(argv)
    try:
        machine = MachineSpec.from_text(args.machine.read_text(encoding="utf-8"))
        host, port = parse_endpoint(args.listen)
    except (OSError, ConfigError, ValueError) as exc:
        return _die(2, f"config: {exc}")
    if args.printer != "sim" and not args.printer.startswith("pipe:"):
        return _die(2, "--printer must be 'sim' or 'pipe:HOST:PORT'")
    workdir = args.workdir or Path(tempfile.mkdtemp(prefix="stlstream-"))
    listener = socket.create_server((host, port))
    if ready is not None:
        ready(listener.getsockname()[:2])
    code, jobs = 0, 0
    try:
        while max_jobs is None or jobs < max_jobs:
            conn, peer = listener.accept()
            log.info("job from %s", peer)
            try:
                printer = _open_printer(args.printer, machine)
            except (OSError, ValueError) as exc:
                conn.close()
                code = _die(6, f"printer: {exc}")
                jobs += 1
                continue
            stream = FrameStream(conn)
            try:
                report = run_manufacturer(stream, machine, printer, workdir, pipeline_depth=args.pipeline_depth)
            finally:
                stream.close()
                printer.close()
            if args.report:
                with open(args.report, "a", encoding="utf-8") as f:
                    f.write(report.to_jsonl())
            code = report.exit_code
            if code:
                print(f"error: job failed ({report.status}): {report.error}", file=sys.stderr)
            jobs += 1
    finally:
        listener.close()
    return code


def _open_printer(spec: str, machine: MachineSpec):
    if spec == "sim":
        return DirectChannel(PrinterSim(machine))
    return SocketChannel(parse_endpoint(spec[len("pipe:"):]))


# monoslice ---------------------------------------------------------------------------

def mono_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monoslice", description="Slice a whole design in one pass (reference print).")
    p.add_argument("--stl", required=True, type=Path)
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--machine", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    return p


def monoslice(mesh, config: PrintConfig, machine: MachineSpec, supports: SupportSpec | None = SupportSpec(),
              orientation: RigidTransform | None = None):
    """Same preparation as the client (no guide), then one whole-mesh slice."""
    prepared = prepare_mesh(mesh, config.layer_height, orientation, supports, None, bed=(machine.bed_x, machine.bed_y))
    return slice_mesh(prepared, config, machine)


def mono_main(argv=None) -> int:
    args = mono_parser().parse_args(argv)
    try:
        config = PrintConfig.from_text(args.config.read_text(encoding="utf-8"))
        machine = MachineSpec.from_text(args.machine.read_text(encoding="utf-8"))
    except (OSError, ConfigError) as exc:
        return _die(2, f"config: {exc}")
    try:
        mesh = parse_stl(args.stl.read_bytes())
        program = monoslice(mesh, config, machine)
    except (OSError, MeshError, SliceError) as exc:
        return _die(4, f"geometry: {exc}")
    args.out.write_text(program.to_text(), encoding="ascii")
    return 0


def _entry(fn):
    def run():
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
        sys.exit(fn())
    return run


client = _entry(client_main)
server = _entry(server_main)
mono = _entry(mono_main)


def load_report(path) -> JobReport:
    return JobReport.from_jsonl(Path(path).read_text(encoding="utf-8"))
