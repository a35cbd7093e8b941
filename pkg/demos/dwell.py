"""
Why the manufacturer fetches one layer ahead.

Each layer reaches the manufacturer some time after it is requested.
If the next layer is only requested once the current one has printed,
the hot nozzle waits over the part at every layer change and oozes.
Requesting layer n+1 while layer n prints hides the delay.
"""
import tempfile
import threading

from stlstream import shapes
from stlstream.config import MachineSpec, PrintConfig
from stlstream.printer_sim import DirectChannel, PrinterSim
from stlstream.protocol import ManufacturerSession, local_pair, run_client


def run(depth, latency):
    machine = MachineSpec()
    a, b = local_pair()
    sim = PrinterSim(machine)
    session = ManufacturerSession(b, machine, DirectChannel(sim), tempfile.mkdtemp(),
                                  pipeline_depth=depth, fetch_latency=latency)
    th = threading.Thread(target=session.run)
    th.start()
    run_client(shapes.box((0, 0, 0), (20, 20, 3)), None, PrintConfig(), a)
    th.join()
    return session.report, sim.dwell_report()


def main():
    report, _ = run(2, 0.0)
    layer_time = min(r.t_end - r.t_start for r in report.layers)
    print(f"shortest layer takes {layer_time:.1f} s of printer time")
    for latency in (0.25 * layer_time, 0.5 * layer_time, 0.9 * layer_time):
        for depth in (1, 2):
            report, dwell = run(depth, latency)
            print(f"latency {latency:5.1f} s  depth {depth}:  {dwell.blob_count:2d} blobs, "
                  f"longest idle {dwell.summary()['max_idle']:.2f} s, "
                  f"job {report.layers[-1].t_end / 60:.1f} min")


if __name__ == "__main__":
    main()
