"""Physical machine: frames, cost ledger, observer fan-out."""
import pytest

from enclavesim.errors import OutOfRange
from enclavesim.machine import (
    PAGE_SIZE,
    CostLedger,
    CostWeights,
    MachineConfig,
    Observer,
    PhysicalMachine,
)


@pytest.fixture
def machine():
    return PhysicalMachine(MachineConfig(frames=8, pcpus=2))


def test_boot_state(machine):
    assert machine.n_frames == 8
    assert len(machine.pcpus) == 2
    assert [p.id for p in machine.pcpus] == [0, 1]
    assert all(machine.frame_is_zero(f) for f in range(8))
    assert machine.fault_count == 0


def test_read_write_roundtrip(machine):
    machine.write_frame(3, 100, b"hello")
    assert machine.read_frame(3, 100, 5) == b"hello"
    assert machine.read_frame(3, 99, 7) == b"\x00hello\x00"
    assert not machine.frame_is_zero(3)


def test_zero_frame(machine):
    machine.write_frame(2, 0, b"\xff" * PAGE_SIZE)
    machine.zero_frame(2)
    assert machine.frame_is_zero(2)
    assert machine.ledger.zero_bytes == PAGE_SIZE


def test_bounds_checking(machine):
    with pytest.raises(OutOfRange):
        machine.read_frame(8, 0, 1)
    with pytest.raises(OutOfRange):
        machine.read_frame(-1, 0, 1)
    with pytest.raises(OutOfRange):
        machine.write_frame(0, PAGE_SIZE - 2, b"abc")
    with pytest.raises(OutOfRange):
        machine.read_frame(0, PAGE_SIZE, 1)


def test_write_observer_carries_data(machine):
    seen = []

    class Spy(Observer):
        def on_write(self, frame, offset, data):
            seen.append((frame, offset, bytes(data)))

        def on_zero(self, frame):
            seen.append(("zero", frame))

    machine.observers.append(Spy())
    machine.write_frame(1, 7, b"xyz")
    machine.zero_frame(1)
    assert seen == [(1, 7, b"xyz"), ("zero", 1)]


def test_ledger_units_weighted():
    ledger = CostLedger(pt_ops=3, zero_bytes=2 * PAGE_SIZE, ctx_switches=5,
                        hypercalls=7, work_units=11)
    flat = CostWeights()
    assert ledger.units(flat) == 3 + 2 + 5 + 7 + 11
    heavy = CostWeights(pt_op=10, zero_page=100, ctx_switch=2, hypercall=3,
                        work_unit=1)
    assert ledger.units(heavy) == 30 + 200 + 10 + 21 + 11


def test_ledger_snapshot_and_reset():
    ledger = CostLedger(pt_ops=1, zero_bytes=2, ctx_switches=3, hypercalls=4,
                        work_units=5)
    snap = ledger.snapshot()
    assert snap == {"pt_ops": 1, "zero_bytes": 2, "ctx_switches": 3,
                    "hypercalls": 4, "work_units": 5}
    ledger.reset()
    assert ledger.units(CostWeights()) == 0
    # the snapshot is a copy, not a view
    assert snap["pt_ops"] == 1


def test_now_is_ledger_units(machine):
    before = machine.now()
    machine.zero_frame(0)
    assert machine.now() == before + 1  # one page zeroed at weight one
