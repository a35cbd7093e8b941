import os
import random
import socket
import struct
import tempfile
import threading
import zlib

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import stream_job
from stlstream import shapes
from stlstream.config import MACHINE_KEYS, PUBLIC_MACHINE_KEYS, MachineSpec, PrintConfig, format_kv, parse_kv
from stlstream.printer_sim import DirectChannel, PrinterSim
from stlstream.protocol import (
    MAX_PAYLOAD, FrameError, Kind, ManufacturerSession, Message, RetentionError, StorageLedger,
    frame_message, local_pair, parse_endpoint, parse_frame, replay, run_client,
)
from stlstream.sectioner import prepare_mesh, section_job

M = MachineSpec()
H = 0.3
SLABS = section_job(prepare_mesh(shapes.cube(3), H, bed=(M.bed_x, M.bed_y)), H)
PAYLOADS = [s.to_stl() for s in SLABS]
CONFIG = PrintConfig().to_text().encode()

messages = st.builds(
    lambda kind, index, payload: Message(kind, index if kind in (Kind.LAYER_REQUEST, Kind.LAYER_DATA) else 0, payload),
    st.sampled_from(list(Kind)), st.integers(0, 2**32 - 1), st.binary(max_size=512),
)


# framing ---------------------------------------------------------------------

def test_layer_request_frame_is_18_bytes():
    frame = frame_message(Message(Kind.LAYER_REQUEST, 3))
    assert len(frame) == 18
    assert frame[:4] == b"STLS" and frame[4] == 1 and frame[5] == 4
    assert struct.unpack_from("<II", frame, 6) == (3, 0)
    assert struct.unpack_from("<I", frame, 14)[0] == zlib.crc32(b"")


@given(messages)
def test_frame_roundtrip(msg):
    assert parse_frame(frame_message(msg)) == msg


@given(messages.filter(lambda m: m.payload), st.data())
def test_flipped_payload_byte_is_crc_error(msg, data):
    frame = bytearray(frame_message(msg))
    i = data.draw(st.integers(14, 14 + len(msg.payload) - 1))
    frame[i] ^= data.draw(st.integers(1, 255))
    with pytest.raises(FrameError) as info:
        parse_frame(bytes(frame))
    assert info.value.reason == "crc"


@pytest.mark.parametrize("mutate, reason", [
    (lambda f: f[:10], "truncated"),
    (lambda f: f[:-1], "truncated"),
    (lambda f: b"XTLS" + f[4:], "magic"),
    (lambda f: f[:4] + b"\x02" + f[5:], "version"),
    (lambda f: f[:5] + b"\x09" + f[6:], "kind"),
    (lambda f: f + b"\0", "length"),
    (lambda f: f[:10] + struct.pack("<I", MAX_PAYLOAD + 1) + f[14:], "length"),
    (lambda f: f[:5] + b"\x03" + struct.pack("<I", 7) + f[10:], "index"),
])
def test_frame_errors(mutate, reason):
    frame = frame_message(Message(Kind.LAYER_DATA, 2, b"payload"))
    with pytest.raises(FrameError) as info:
        parse_frame(mutate(frame))
    assert info.value.reason == reason


def test_frame_message_limits():
    with pytest.raises(ValueError):
        frame_message(Message(Kind.LAYER_DATA, 2**32))


@given(st.binary(max_size=64))
def test_random_bytes_never_crash_parser(data):
    try:
        parse_frame(data)
    except FrameError:
        pass


@given(st.lists(messages, max_size=8))
def test_stream_preserves_sequence(msgs):
    a, b = local_pair(timeout=5)
    th = threading.Thread(target=lambda: [a.send(m) for m in msgs])
    th.start()
    got = [b.recv() for _ in msgs]
    th.join()
    assert got == msgs
    assert a.bytes_sent == b.bytes_received == sum(len(frame_message(m)) for m in msgs)
    a.close()
    b.close()


def test_crc_error_keeps_stream_in_sync():
    a, b = local_pair(timeout=5)
    bad = bytearray(frame_message(Message(Kind.LAYER_DATA, 1, b"abc")))
    bad[15] ^= 1
    a.send_raw(bytes(bad))
    a.send(Message(Kind.JOB_DONE))
    with pytest.raises(FrameError, match="crc"):
        b.recv()
    assert b.recv().kind == Kind.JOB_DONE
    a.close()
    b.close()


def test_parse_endpoint():
    assert parse_endpoint("localhost:7000") == ("localhost", 7000)
    assert parse_endpoint("::1:80") == ("::1", 80)
    with pytest.raises(ValueError):
        parse_endpoint("localhost")


# ledger ----------------------------------------------------------------------

def test_ledger_enforces_two_resident(tmp_path):
    led = StorageLedger(tmp_path)
    led.request(0)
    led.store("stl", 0, b"a")
    led.request(1)
    led.store("stl", 1, b"b")
    with pytest.raises(RetentionError):
        led.request(2)
    with pytest.raises(RetentionError):
        led.store("stl", 2, b"c")
    led.delete_layer(0)
    led.request(2)
    led.store("stl", 2, b"c")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["layer_1.stl", "layer_2.stl"]
    led.purge()
    assert list(tmp_path.iterdir()) == []
    audit = replay(led.events)
    assert audit.ok and audit.max_resident["stl"] == 2


def test_replay_flags_late_delete():
    from stlstream.protocol import LedgerEvent
    events = [
        LedgerEvent(0, 0, "request", "layer", 0), LedgerEvent(1, 0, "store", "stl", 0),
        LedgerEvent(2, 0, "request", "layer", 1), LedgerEvent(3, 0, "store", "stl", 1),
        LedgerEvent(4, 0, "request", "layer", 2), LedgerEvent(5, 0, "store", "stl", 2),
    ]
    audit = replay(events)
    assert not audit.ok and audit.max_resident["stl"] == 3
    assert any("before stl(0) deleted" in v for v in audit.violations)


# full sessions -------------------------------------------------------------------

def test_ten_layer_job_ledger_and_z():
    run = stream_job(shapes.cube(3))
    assert run.client.ok and run.server.ok
    sent = [m for m in run.client_stream.sent if m.kind == Kind.LAYER_DATA]
    assert [m.layer_index for m in sent] == list(range(10))
    audit = replay(run.events)
    assert audit.ok and audit.max_resident == {"stl": 2, "gcode": 2}
    assert os.listdir(run.workdir) == []
    assert run.server.layer(4).z == pytest.approx(1.5)
    assert run.session.state.z_offset == pytest.approx(10 * H)
    assert run.client.extruded_length == pytest.approx(run.server.extruded_length)


def test_one_outstanding_request_after_warmup():
    run = stream_job(shapes.t_shape())
    outstanding = peak = 0
    for e in run.events:
        if e.action == "request":
            outstanding += 1
        elif e.action == "store" and e.artifact == "stl":
            outstanding -= 1
        peak = max(peak, outstanding)
    assert peak == 1
    # bytes seen before printing layer n are layers <= n+1
    seen = [e.index for e in run.events if e.action == "store" and e.artifact == "stl"]
    assert seen == sorted(seen) == list(range(len(seen)))


def test_config_boundary():
    run = stream_job(shapes.cube(3))
    config = [m for m in run.client_stream.sent if m.kind == Kind.CONFIG]
    assert len(config) == 1 and not set(parse_kv(config[0].text())) & MACHINE_KEYS
    server_frames = run.server_stream.sent
    assert server_frames[0].kind == Kind.SPEC_REPLY
    assert set(parse_kv(server_frames[0].text())) == set(PUBLIC_MACHINE_KEYS)
    private = MACHINE_KEYS - set(PUBLIC_MACHINE_KEYS)
    for m in server_frames[1:]:
        if m.payload:
            assert not set(parse_kv(m.text())) & private


def test_layer_height_outside_range_aborts_before_geometry():
    run = stream_job(shapes.cube(3), config=PrintConfig(layer_height=0.5))
    assert run.client.exit_code == 2 and run.client.status == "spec"
    assert not [m for m in run.client_stream.sent if m.kind in (Kind.CONFIG, Kind.LAYER_DATA)]
    assert run.client_stream.sent[-1].kind == Kind.ABORT
    assert run.server.status == "client-abort" and os.listdir(run.workdir) == []


def test_standard_layer_height_accepted():
    run = stream_job(shapes.cube(1.2), config=PrintConfig(layer_height=0.3))
    assert run.client.ok and run.server.layers_printed == 4


def test_crc_corruption_triggers_one_rerequest():
    for target in (3, 9):
        a, b = local_pair(timeout=10)
        plain = a.send
        state = {"done": False}

        def corrupt(msg, target=target):
            if msg.kind == Kind.LAYER_DATA and msg.layer_index == target and not state["done"]:
                state["done"] = True
                frame = bytearray(frame_message(msg))
                frame[20] ^= 0xFF
                a.send_raw(bytes(frame))
                return
            plain(msg)

        a.send = corrupt
        workdir = tempfile.mkdtemp()
        session = ManufacturerSession(b, M, DirectChannel(PrinterSim(M)), workdir)
        th = threading.Thread(target=session.run)
        th.start()
        client = run_client(shapes.cube(3), None, PrintConfig(), a)
        th.join()
        assert client.ok and session.report.ok, (client.error, session.report.error)
        requests = [m.layer_index for m in b.sent if m.kind == Kind.LAYER_REQUEST]
        assert requests.count(target) == 2
        assert session.report.layers_printed == 10
        assert os.listdir(workdir) == []


# scripted adversarial peers ------------------------------------------------------

def drain(stream):
    out = []
    while True:
        try:
            out.append(stream.recv())
        except (FrameError, OSError):
            return out


def against_manufacturer(script):
    """Run ``script(peer)`` as the client; returns (report, frames the peer got, workdir)."""
    a, b = local_pair(timeout=5)
    workdir = tempfile.mkdtemp()
    session = ManufacturerSession(b, M, DirectChannel(PrinterSim(M)), workdir)
    th = threading.Thread(target=session.run)
    th.start()
    got = []
    try:
        script(a, got)
    except (FrameError, OSError):
        pass
    th.join(10)
    assert not th.is_alive()
    b.close()
    got += drain(a)
    a.close()
    return session.report, got, workdir


def recv_into(peer, got):
    msg = peer.recv()
    got.append(msg)
    return msg


def handshake(peer, got, config=CONFIG):
    peer.send(Message(Kind.SPEC_REQUEST))
    recv_into(peer, got)
    peer.send(Message(Kind.CONFIG, 0, config))


def serve(peer, got, upto):
    for _ in range(upto):
        req = recv_into(peer, got)
        peer.send(Message(Kind.LAYER_DATA, req.layer_index, PAYLOADS[req.layer_index]))


def _unsolicited_layer(p, got):
    p.send(Message(Kind.LAYER_DATA, 0, PAYLOADS[0]))


def _duplicate_spec_request(p, got):
    p.send(Message(Kind.SPEC_REQUEST))
    recv_into(p, got)
    p.send(Message(Kind.SPEC_REQUEST))


def _machine_key_in_config(p, got):
    handshake(p, got, CONFIG + b"hotend_temp=300\n")


def _out_of_order_index(p, got):
    handshake(p, got)
    recv_into(p, got)
    p.send(Message(Kind.LAYER_DATA, 1, PAYLOADS[1]))


def _skip_ahead_later(p, got):
    handshake(p, got)
    serve(p, got, 2)
    recv_into(p, got)
    p.send(Message(Kind.LAYER_DATA, 5, PAYLOADS[5]))


def _corrupt_crc_twice(p, got):
    handshake(p, got)
    for _ in range(2):
        req = recv_into(p, got)
        frame = bytearray(frame_message(Message(Kind.LAYER_DATA, req.layer_index, PAYLOADS[0])))
        frame[30] ^= 0x55
        p.send_raw(bytes(frame))


def _oversized_frame(p, got):
    handshake(p, got)
    recv_into(p, got)
    p.send_raw(b"STLS\x01\x05" + struct.pack("<II", 0, MAX_PAYLOAD + 1))


def _config_after_layer_data(p, got):
    handshake(p, got)
    serve(p, got, 2)
    recv_into(p, got)
    p.send(Message(Kind.CONFIG, 0, CONFIG))


def _garbage_stl(p, got):
    handshake(p, got)
    recv_into(p, got)
    p.send(Message(Kind.LAYER_DATA, 0, b"solid nonsense\nfacet\n"))


def _bad_magic(p, got):
    handshake(p, got)
    recv_into(p, got)
    p.send_raw(b"HTTP/1.1 200 OK\r\n\r\n")


def _wrong_layer_z(p, got):
    # layer 1's slab offered as layer 0: the slab bottom does not match z_offset
    handshake(p, got)
    recv_into(p, got)
    p.send(Message(Kind.LAYER_DATA, 0, PAYLOADS[1]))


def _unknown_kind(p, got):
    handshake(p, got)
    recv_into(p, got)
    p.send_raw(b"STLS\x01\x2a" + struct.pack("<II", 0, 0) + struct.pack("<I", zlib.crc32(b"")))


def _bad_config_value(p, got):
    handshake(p, got, b"layer_height=0.9\n")


MANUFACTURER_SCENARIOS = {
    "unsolicited-layer-data": (_unsolicited_layer, "protocol"),
    "duplicate-spec-request": (_duplicate_spec_request, "protocol"),
    "machine-key-in-config": (_machine_key_in_config, "config"),
    "out-of-order-index": (_out_of_order_index, "protocol"),
    "skip-ahead-mid-job": (_skip_ahead_later, "protocol"),
    "corrupt-crc-twice": (_corrupt_crc_twice, "protocol"),
    "oversized-frame": (_oversized_frame, "protocol"),
    "config-after-layer-data": (_config_after_layer_data, "protocol"),
    "garbage-stl": (_garbage_stl, "stl"),
    "bad-magic": (_bad_magic, "protocol"),
    "wrong-layer-geometry": (_wrong_layer_z, "stl"),
    "unknown-kind": (_unknown_kind, "protocol"),
    "layer-height-out-of-range": (_bad_config_value, "config"),
}


@pytest.mark.parametrize("name", sorted(MANUFACTURER_SCENARIOS))
def test_manufacturer_rejects_adversarial_client(name):
    script, status = MANUFACTURER_SCENARIOS[name]
    report, got, workdir = against_manufacturer(script)
    assert report.status == status, report.error
    assert not report.ok
    assert got and got[-1].kind == Kind.ABORT
    assert os.listdir(workdir) == []
    assert report.layers_printed <= 2


def against_client(script, config=PrintConfig()):
    a, b = local_pair(timeout=5)
    box = {}
    th = threading.Thread(target=lambda: box.setdefault("r", run_client(shapes.cube(3), None, config, a)))
    th.start()
    got = []
    try:
        script(b, got)
    except (FrameError, OSError):
        pass
    th.join(10)
    assert not th.is_alive()
    a.close()
    got += drain(b)
    b.close()
    return box["r"], got


def spec_reply(limits=M.public().to_text().encode()):
    return Message(Kind.SPEC_REPLY, 0, limits)


def _accept(p, got, reply=None):
    recv_into(p, got)
    p.send(reply or spec_reply())
    return recv_into(p, got)


def _request_ahead(p, got):
    _accept(p, got)
    p.send(Message(Kind.LAYER_REQUEST, 0))
    recv_into(p, got)
    p.send(Message(Kind.LAYER_REQUEST, 2))


def _incomplete_spec(p, got):
    text = format_kv({k: v for k, v in parse_kv(M.public().to_text()).items() if k != "bed_x"})
    _accept(p, got, spec_reply(text.encode()))


def _narrow_machine(p, got):
    narrow = parse_kv(M.public().to_text())
    narrow["layer_height_max"] = "0.2"
    _accept(p, got, spec_reply(format_kv(narrow).encode()))


def _duplicate_spec_reply(p, got):
    _accept(p, got)
    p.send(spec_reply())


def _unsolicited_data_to_client(p, got):
    _accept(p, got)
    p.send(Message(Kind.LAYER_DATA, 0, PAYLOADS[0]))


def _corrupt_to_client(p, got):
    _accept(p, got)
    frame = bytearray(frame_message(Message(Kind.LAYER_REQUEST, 0, b"x")))
    frame[14] ^= 1
    p.send_raw(bytes(frame))


def _re_request_twice(p, got):
    _accept(p, got)
    for i in (0, 0, 0):
        p.send(Message(Kind.LAYER_REQUEST, i))
        recv_into(p, got)


def _tiny_bed(p, got):
    small = parse_kv(M.public().to_text())
    small["bed_x"] = small["bed_y"] = "5.0"
    _accept(p, got, spec_reply(format_kv(small).encode()))


CLIENT_SCENARIOS = {
    "request-ahead": (_request_ahead, "protocol", 3),
    "incomplete-spec-reply": (_incomplete_spec, "protocol", 3),
    "layer-height-incompatible": (_narrow_machine, "spec", 2),
    "duplicate-spec-reply": (_duplicate_spec_reply, "protocol", 3),
    "unsolicited-layer-data": (_unsolicited_data_to_client, "protocol", 3),
    "corrupt-crc": (_corrupt_to_client, "protocol", 3),
    "repeated-re-request": (_re_request_twice, "protocol", 3),
    "job-larger-than-bed": (_tiny_bed, "geometry", 4),
}


@pytest.mark.parametrize("name", sorted(CLIENT_SCENARIOS))
def test_client_rejects_adversarial_manufacturer(name):
    script, status, code = CLIENT_SCENARIOS[name]
    report, got = against_client(script)
    assert (report.status, report.exit_code) == (status, code), report.error
    assert got[-1].kind == Kind.ABORT
    assert len({m.layer_index for m in got if m.kind == Kind.LAYER_DATA}) <= 1


def test_client_spec_abort_sends_no_geometry():
    report, got = against_client(_narrow_machine)
    assert not [m for m in got if m.kind in (Kind.CONFIG, Kind.LAYER_DATA)]


def test_fuzzed_frames_into_manufacturer_never_leak():
    rng = random.Random(1)
    for _ in range(25):
        frames = [frame_message(Message(Kind.SPEC_REQUEST)), frame_message(Message(Kind.CONFIG, 0, CONFIG))]
        blob = bytearray(b"".join(frames) + frame_message(Message(Kind.LAYER_DATA, 0, PAYLOADS[0])))
        for _ in range(rng.randint(1, 4)):
            blob[rng.randrange(len(blob))] = rng.randrange(256)

        def script(p, got, blob=bytes(blob)):
            p.send_raw(blob)
            # end of input instead of a read timeout when a length field was hit
            p.sock.shutdown(socket.SHUT_WR)

        report, got, workdir = against_manufacturer(script)
        assert report.status != "running"
        assert os.listdir(workdir) == []
