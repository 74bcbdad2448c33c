"""Channel protocol: header discipline, transitions, payload round trips."""
import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enclavesim.channel import (
    CHANNEL_MAGIC,
    HEADER_LEN,
    LEGAL_TRANSITIONS,
    ChannelStatus,
    ChannelView,
)
from enclavesim.errors import (
    ChannelBusy,
    ChannelError,
    ChannelNoRequest,
    ChannelTooLarge,
)
from enclavesim.machine import PAGE_SIZE, MachineConfig, Observer, PhysicalMachine
from enclavesim.stage2 import PERM_RO, PERM_RW, Stage2Table


def make_channel(pages=1):
    """Two views (driver and enclave side) of the same frames."""
    machine = PhysicalMachine(MachineConfig(frames=4))
    t_primary = Stage2Table(0, machine)
    t_enclave = Stage2Table(1, machine)
    for i in range(pages):
        t_primary.map(i, i, PERM_RW)
        t_enclave.map(8 + i, i, PERM_RW)
    primary = ChannelView(machine, t_primary, 0, pages, "primary")
    enclave = ChannelView(machine, t_enclave, 8 << 12, pages, "enclave")
    primary.init()
    return machine, primary, enclave


def test_init_formats_header():
    _, primary, enclave = make_channel()
    magic, status, cmd, arg_len, ret_len = enclave.read_header()
    assert magic == CHANNEL_MAGIC
    assert status == ChannelStatus.IDLE
    assert (cmd, arg_len, ret_len) == (0, 0, 0)


def test_request_response_roundtrip():
    _, primary, enclave = make_channel()
    primary.write_request(7, b"some args")
    cmd, args = enclave.serve()
    assert (cmd, args) == (7, b"some args")
    enclave.complete(b"the reply")
    status, ret = primary.read_response()
    assert status is ChannelStatus.DONE
    assert ret == b"the reply"
    # channel is reusable immediately
    primary.write_request(8, b"")
    assert enclave.serve() == (8, b"")


def test_error_reply():
    _, primary, enclave = make_channel()
    primary.write_request(1, b"x")
    enclave.serve()
    enclave.complete_error()
    status, ret = primary.read_response()
    assert status is ChannelStatus.ERROR
    assert ret == b""


def test_busy_channel_rejects_second_request():
    _, primary, enclave = make_channel()
    primary.write_request(1, b"")
    with pytest.raises(ChannelBusy):
        primary.write_request(2, b"")


def test_capacity_enforced():
    _, primary, enclave = make_channel()
    assert primary.capacity == PAGE_SIZE - HEADER_LEN
    primary.write_request(1, b"a" * primary.capacity)  # exactly fits
    enclave.serve()
    with pytest.raises(ChannelTooLarge):
        enclave.complete(b"b" * (primary.capacity + 1))
    enclave.complete(b"")
    with pytest.raises(ChannelTooLarge):
        primary.write_request(1, b"a" * (primary.capacity + 1))


def test_multi_page_capacity():
    _, primary, enclave = make_channel(pages=2)
    big = bytes(range(256)) * 25  # 6400 bytes, crosses the page boundary
    primary.write_request(3, big)
    cmd, args = enclave.serve()
    assert args == big
    enclave.complete(big[::-1])
    assert primary.read_response() == (ChannelStatus.DONE, big[::-1])


def test_serve_without_request():
    _, primary, enclave = make_channel()
    with pytest.raises(ChannelNoRequest):
        enclave.serve()


def test_read_response_never_raises_on_state():
    _, primary, enclave = make_channel()
    assert primary.read_response() == (ChannelStatus.IDLE, b"")
    primary.write_request(1, b"ping")
    assert primary.read_response() == (ChannelStatus.REQUEST, b"")
    primary.mark_preempted()
    assert primary.read_response() == (ChannelStatus.PREEMPTED, b"")


def test_preempt_rearm_cycle():
    _, primary, enclave = make_channel()
    primary.write_request(1, b"work")
    primary.mark_preempted()
    primary.rearm_request()
    assert enclave.serve() == (1, b"work")


def test_transition_legality_exhaustive():
    """Every (old, new) pair outside the legal set is refused, and the
    refusal leaves the status word untouched."""
    for old, new in itertools.product(ChannelStatus, ChannelStatus):
        _, primary, enclave = make_channel()
        primary._write(4, int(old).to_bytes(4, "little"))
        if (old, new) in LEGAL_TRANSITIONS:
            primary._set_status(new)
            assert primary.status() == new
        else:
            with pytest.raises(ChannelError):
                primary._set_status(new)
            assert primary.status() == old


def test_corrupt_status_detected():
    _, primary, enclave = make_channel()
    primary._write(4, (99).to_bytes(4, "little"))
    with pytest.raises(ChannelError):
        primary.read_response()
    with pytest.raises(ChannelError):
        primary._set_status(ChannelStatus.REQUEST)


def test_bad_magic_detected():
    _, primary, enclave = make_channel()
    primary._write(0, b"XXXX")
    primary._write(4, int(ChannelStatus.REQUEST).to_bytes(4, "little"))
    with pytest.raises(ChannelError):
        enclave.serve()
    with pytest.raises(ChannelError):
        primary.read_response()


def test_status_written_after_payload():
    """Once a reader sees REQUEST, the args bytes are already in place."""
    machine, primary, enclave = make_channel()
    order = []

    class Spy(Observer):
        def on_write(self, frame, offset, data):
            order.append(("write", offset, bytes(data)))

        def on_channel(self, side, old, new, header, payload):
            order.append(("status", new, payload))

    machine.observers.append(Spy())
    primary.write_request(5, b"payload!")
    status_pos = next(i for i, ev in enumerate(order) if ev[0] == "status")
    payload_pos = next(i for i, ev in enumerate(order)
                       if ev[0] == "write" and ev[2] == b"payload!")
    assert payload_pos < status_pos
    assert order[status_pos][2] == b"payload!"


def test_lost_write_mapping_faults():
    machine, primary, enclave = make_channel()
    primary.table.protect(0, PERM_RO)
    with pytest.raises(ChannelError):
        primary.write_request(1, b"")
    assert machine.fault_count == 1


def test_channel_writes_are_marked(monkeypatch):
    """During protocol writes the machine-wide marker is raised, so the
    confinement oracle can tell them from stray stores."""
    machine, primary, enclave = make_channel()
    depths = []

    class Spy(Observer):
        def on_write(self, frame, offset, data):
            depths.append(machine.channel_op_depth)

    machine.observers.append(Spy())
    primary.write_request(1, b"hi")
    assert depths and all(d > 0 for d in depths)
    assert machine.channel_op_depth == 0


@settings(max_examples=60, deadline=None)
@given(cmd=st.integers(min_value=0, max_value=2**32 - 1),
       args=st.binary(max_size=PAGE_SIZE - HEADER_LEN),
       ret=st.binary(max_size=PAGE_SIZE - HEADER_LEN))
def test_roundtrip_property(cmd, args, ret):
    _, primary, enclave = make_channel()
    primary.write_request(cmd, args)
    got_cmd, got_args = enclave.serve()
    assert (got_cmd, got_args) == (cmd, args)
    enclave.complete(ret)
    assert primary.read_response() == (ChannelStatus.DONE, ret)
