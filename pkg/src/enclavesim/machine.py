"""Physical machine model: frames of memory, pCPUs, and the cost ledger.

All byte content lives here; every other module reads and writes frames
through this one.  Cost accounting is a set of monotonic counters; simulated
time is their weighted sum, so identical operation sequences always produce
identical timelines.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

from .errors import OutOfRange

PAGE_SIZE = 4096
PAGE_SHIFT = 12
OFFSET_MASK = PAGE_SIZE - 1


class Observer:
    """Hook point for tracing and verification oracles.

    Subclasses override what they care about.  Hooks fire synchronously at
    the primitive that performs the action (frame writes and zeroing here,
    mapping changes in the stage-2 code, scheduling in the hypervisor), so
    an oracle sees the true operation order, not a reconstruction.
    """

    def on_write(self, frame: int, offset: int, data: bytes) -> None:
        pass

    def on_zero(self, frame: int) -> None:
        pass

    def on_map(self, vm: int, ipa_page: int, frame: int, perms) -> None:
        pass

    def on_unmap(self, vm: int, ipa_page: int, frame: int) -> None:
        pass

    def on_protect(self, vm: int, ipa_page: int, frame: int, old, new) -> None:
        pass

    def on_fault(self, fault) -> None:
        pass

    def on_push(self, pcpu: int, vcpu) -> None:
        pass

    def on_pop(self, pcpu: int, vcpu, resumption) -> None:
        pass

    def on_switch(self, pcpu: int, frm, to, reason: str) -> None:
        pass

    def on_hypercall(self, vcpu, call) -> None:
        pass

    def on_hypercall_error(self, vcpu, call, err: Exception) -> None:
        pass

    def on_work(self, vcpu, units: int) -> None:
        pass

    def on_interrupt(self, pcpu: int, target, outcome: str) -> None:
        pass

    def on_channel(self, side: str, old: int, new: int,
                   header: bytes, payload: bytes) -> None:
        pass


@dataclass
class MachineConfig:
    frames: int = 8192          # 32 MiB at the default page size
    pcpus: int = 1
    max_vms: int = 16
    os_reserved_pages: int = 64  # low pages kept by the OS, never donated
    weights: "CostWeights" = field(default_factory=lambda: CostWeights())


@dataclass(frozen=True)
class CostWeights:
    """Units charged per costed event.  Zero-fill is charged per page."""

    pt_op: int = 1
    ctx_switch: int = 1
    hypercall: int = 1
    work_unit: int = 1
    zero_page: int = 1


@dataclass
class CostLedger:
    pt_ops: int = 0
    zero_bytes: int = 0
    ctx_switches: int = 0
    hypercalls: int = 0
    work_units: int = 0

    def snapshot(self) -> dict:
        return {
            "pt_ops": self.pt_ops,
            "zero_bytes": self.zero_bytes,
            "ctx_switches": self.ctx_switches,
            "hypercalls": self.hypercalls,
            "work_units": self.work_units,
        }

    def units(self, weights: CostWeights) -> int:
        """Total simulated time in abstract cost units."""
        return (
            self.pt_ops * weights.pt_op
            + self.ctx_switches * weights.ctx_switch
            + self.hypercalls * weights.hypercall
            + self.work_units * weights.work_unit
            + (self.zero_bytes * weights.zero_page) // PAGE_SIZE
        )

    def reset(self) -> None:
        self.pt_ops = 0
        self.zero_bytes = 0
        self.ctx_switches = 0
        self.hypercalls = 0
        self.work_units = 0


@dataclass
class Pcpu:
    id: int
    current_vcpu: Optional[object] = None  # set by the hypervisor


class PhysicalMachine:
    """Fixed array of zero-initialised frames plus pCPUs and the ledger."""

    def __init__(self, config: Optional[MachineConfig] = None):
        self.config = config or MachineConfig()
        self.n_frames = self.config.frames
        self.frames = [bytearray(PAGE_SIZE) for _ in range(self.n_frames)]
        self.pcpus = [Pcpu(i) for i in range(self.config.pcpus)]
        self.ledger = CostLedger()
        self.observers: List[Observer] = []
        # >0 while a ChannelView performs a sanctioned protocol write; lets
        # the write-confinement oracle tell protocol traffic from stray
        # guest writes into channel frames
        self.channel_op_depth = 0
        # translation faults served so far (not a cost, a cross-check
        # against the trace)
        self.fault_count = 0

    def _check_frame(self, frame: int) -> None:
        if not 0 <= frame < self.n_frames:
            raise OutOfRange(f"frame {frame} outside [0, {self.n_frames})")

    def read_frame(self, frame: int, offset: int, length: int) -> bytes:
        self._check_frame(frame)
        if offset < 0 or length < 0 or offset + length > PAGE_SIZE:
            raise OutOfRange(f"read [{offset}, {offset + length}) crosses frame end")
        return bytes(self.frames[frame][offset:offset + length])

    def write_frame(self, frame: int, offset: int, data: bytes) -> None:
        self._check_frame(frame)
        if offset < 0 or offset + len(data) > PAGE_SIZE:
            raise OutOfRange(f"write [{offset}, {offset + len(data)}) crosses frame end")
        self.frames[frame][offset:offset + len(data)] = data
        for obs in self.observers:
            obs.on_write(frame, offset, data)

    def zero_frame(self, frame: int) -> None:
        self._check_frame(frame)
        self.frames[frame][:] = bytes(PAGE_SIZE)
        self.ledger.zero_bytes += PAGE_SIZE
        for obs in self.observers:
            obs.on_zero(frame)

    def frame_is_zero(self, frame: int) -> bool:
        self._check_frame(frame)
        buf = self.frames[frame]
        return buf.count(0) == PAGE_SIZE

    def now(self) -> int:
        """Current simulated time, derived from the ledger."""
        return self.ledger.units(self.config.weights)
