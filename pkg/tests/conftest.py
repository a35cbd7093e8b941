import tempfile
import threading

import pytest
from hypothesis import HealthCheck, settings

from stlstream import shapes
from stlstream.config import MachineSpec, PrintConfig
from stlstream.printer_sim import DirectChannel, PrinterSim
from stlstream.protocol import ManufacturerSession, local_pair, run_client

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def corpus():
    return {
        "cube": shapes.cube(10.0),
        "cone": shapes.cone(5.0, 6.0),
        "tube": shapes.tube(5.0, 3.0, 6.0),
        "t_shape": shapes.t_shape(),
        "table": shapes.table(),
        "gear": shapes.gear(),
    }


class RecordingChannel(DirectChannel):
    """Direct channel that keeps every line sent to the printer."""

    def __init__(self, sim):
        super().__init__(sim)
        self.lines = []

    def send(self, line):
        self.lines.append(line)
        return super().send(line)


class StreamRun:
    def __init__(self, client, session, sim, workdir, streams):
        self.client = client
        self.session = session
        self.server = session.report
        self.sim = sim
        self.workdir = workdir
        self.client_stream, self.server_stream = streams

    @property
    def lines(self):
        return self.session.printer.lines

    @property
    def events(self):
        return self.session.ledger.events


def stream_job(mesh, config=PrintConfig(), machine=MachineSpec(), depth=2, latency=0.0,
               orientation=None, **client_kwargs) -> StreamRun:
    """Run client, manufacturer and simulated printer in one process."""
    a, b = local_pair(timeout=20)
    sim = PrinterSim(machine)
    workdir = tempfile.mkdtemp(prefix="stlstream-test-")
    session = ManufacturerSession(b, machine, RecordingChannel(sim), workdir,
                                  pipeline_depth=depth, fetch_latency=latency)
    th = threading.Thread(target=session.run)
    th.start()
    client = run_client(mesh, orientation, config, a, **client_kwargs)
    th.join()
    a.close()
    b.close()
    return StreamRun(client, session, sim, workdir, (a, b))


@pytest.fixture
def machine():
    return MachineSpec()


@pytest.fixture
def config():
    return PrintConfig()
