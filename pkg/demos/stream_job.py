"""
Stream a T-shaped part from a client to a manufacturer in one process.

The client sections the part into slabs and hands them out one at a
time. The manufacturer slices each slab, strips the per-layer start and
end blocks, validates the result and feeds it to a simulated printer.
Run with ``python demos/stream_job.py``.
"""
import tempfile
import threading

from stlstream import shapes
from stlstream.config import MachineSpec, PrintConfig
from stlstream.printer_sim import DirectChannel, PrinterSim
from stlstream.protocol import Kind, ManufacturerSession, local_pair, replay, run_client


def main():
    machine = MachineSpec()
    config = PrintConfig(layer_height=0.3, fill_density=0.7)
    client_end, server_end = local_pair()
    sim = PrinterSim(machine)
    workdir = tempfile.mkdtemp(prefix="stlstream-demo-")
    session = ManufacturerSession(server_end, machine, DirectChannel(sim), workdir)
    server = threading.Thread(target=session.run)
    server.start()
    client = run_client(shapes.t_shape(), None, config, client_end)
    server.join()

    print(f"client: {client.status}, {client.layers_total} layers, {client.bytes_sent} bytes sent")
    print(f"manufacturer: {session.report.status}, {session.report.layers_printed} layers printed")
    print()
    print(" layer      z  body mm  guide mm  STL bytes")
    for rec in sorted(session.report.layers, key=lambda r: r.index):
        print(f"{rec.index:>6} {rec.z:>6.2f} {rec.extruded_length:>8.1f} {rec.guide_length:>9.1f} {rec.bytes:>10}")

    # what the manufacturer ever held, replayed from its storage log
    audit = replay(session.ledger.events)
    print()
    print(f"peak resident artifacts: {audit.max_resident}, violations: {audit.violations or 'none'}")
    kinds = [m.kind.name for m in client_end.sent]
    print(f"client frames: {kinds.count(Kind.LAYER_DATA.name)} LAYER_DATA, then {kinds[-1]}")
    print(f"printer: {len(sim.snapshot().layers)} layers, {sim.snapshot().e_total:.1f} mm filament, "
          f"{sim.clock / 60:.1f} simulated minutes")


if __name__ == "__main__":
    main()
