"""Top-level simulation wiring.

A Simulation owns one machine, one hypervisor, one trace, a timer queue and
a seeded RNG.  Everything observable funnels into the trace through a
machine observer, so identical (config, seed, operations) always serialize
to byte-identical JSON lines.

Simulated time is the cost ledger's weighted unit sum; timers fire against
that clock from inside the hypervisor's run loop, which is what makes
mid-command preemption deterministic.
"""
from __future__ import annotations

import dataclasses
import heapq
import random
from typing import List, Optional, Tuple, Union

from .hypervisor import Hypercall, Hypervisor, Resumption, Vcpu, Vm
from .machine import MachineConfig, Observer, PhysicalMachine
from .stage2 import Access, AccessFault, Perms, guest_access
from .trace import TraceRecorder


def _vcpu_name(v: Optional[Vcpu]) -> Optional[str]:
    return None if v is None else v.name


def _call_detail(hc: Hypercall) -> dict:
    d = dataclasses.asdict(hc)
    d["call"] = type(hc).__name__
    return d


class TraceObserver(Observer):
    """Bridges primitive-level hooks into trace events."""

    def __init__(self, sim: "Simulation"):
        self.sim = sim

    def _emit(self, kind: str, **detail) -> None:
        sim = self.sim
        pcpu = sim.active_pcpu
        cur = sim.machine.pcpus[pcpu].current_vcpu
        sim.trace.emit(kind, pcpu, _vcpu_name(cur),
                       sim.machine.ledger.snapshot(), **detail)

    def on_map(self, vm: int, ipa_page: int, frame: int, perms: Perms) -> None:
        self._emit("s2_map", vm=vm, ipa_page=ipa_page, frame=frame,
                   perms=perms.tag())

    def on_unmap(self, vm: int, ipa_page: int, frame: int) -> None:
        self._emit("s2_unmap", vm=vm, ipa_page=ipa_page, frame=frame)

    def on_protect(self, vm: int, ipa_page: int, frame: int,
                   old: Perms, new: Perms) -> None:
        self._emit("s2_protect", vm=vm, ipa_page=ipa_page, frame=frame,
                   old=old.tag(), new=new.tag())

    def on_zero(self, frame: int) -> None:
        self._emit("zero_frame", frame=frame)

    def on_fault(self, fault: AccessFault) -> None:
        self._emit("fault", vm=fault.vm, ipa=fault.ipa,
                   fault=fault.kind.value)

    def on_push(self, pcpu: int, vcpu: Vcpu) -> None:
        self.sim.trace.emit("push", pcpu, vcpu.name,
                            self.sim.machine.ledger.snapshot())

    def on_pop(self, pcpu: int, vcpu: Vcpu, resumption: Resumption) -> None:
        self.sim.trace.emit("pop", pcpu, vcpu.name,
                            self.sim.machine.ledger.snapshot(),
                            resumption=resumption.value)

    def on_switch(self, pcpu: int, frm: Vcpu, to: Vcpu, reason: str) -> None:
        self.sim.trace.emit("ctx_switch", pcpu, to.name,
                            self.sim.machine.ledger.snapshot(),
                            frm=frm.name, to=to.name, reason=reason)

    def on_hypercall(self, vcpu: Vcpu, call: Hypercall) -> None:
        self.sim.trace.emit("hypercall", vcpu.pcpu, vcpu.name,
                            self.sim.machine.ledger.snapshot(),
                            **_call_detail(call))

    def on_hypercall_error(self, vcpu: Vcpu, call: Hypercall,
                           err: Exception) -> None:
        self.sim.trace.emit("hypercall_error", vcpu.pcpu, vcpu.name,
                            self.sim.machine.ledger.snapshot(),
                            call=type(call).__name__,
                            error=type(err).__name__, message=str(err))

    def on_work(self, vcpu: Vcpu, units: int) -> None:
        self.sim.trace.emit("work", vcpu.pcpu, vcpu.name,
                            self.sim.machine.ledger.snapshot(), units=units)

    def on_interrupt(self, pcpu: int, target: Vcpu, outcome: str) -> None:
        self.sim.trace.emit("interrupt", pcpu, target.name,
                            self.sim.machine.ledger.snapshot(),
                            target=target.name, outcome=outcome)

    def on_channel(self, side: str, old: int, new: int,
                   header: bytes, payload: bytes) -> None:
        self._emit("channel", side=side, old=old, new=new,
                   header=header.hex(), payload=payload.hex())


class Simulation:
    def __init__(self, config: Optional[MachineConfig] = None, seed: int = 0,
                 program_loader=None):
        if program_loader is None:
            from . import ta_runtime
            program_loader = ta_runtime.load_program
        self.machine = PhysicalMachine(config)
        self.hv = Hypervisor(self.machine, program_loader)
        self.trace = TraceRecorder()
        self.seed = seed
        self.rng = random.Random(seed)
        self.active_pcpu = 0
        # boot work (identity mapping) is setup, not measured activity
        self.machine.ledger.reset()
        self.machine.observers.append(TraceObserver(self))
        cfg = self.machine.config
        self.trace.emit("boot", 0, _vcpu_name(self.machine.pcpus[0].current_vcpu),
                        self.machine.ledger.snapshot(),
                        frames=cfg.frames, pcpus=cfg.pcpus,
                        max_vms=cfg.max_vms,
                        os_reserved_pages=cfg.os_reserved_pages, seed=seed)
        self._timers: List[Tuple[int, int, int]] = []  # (deadline, seq, pcpu)
        self._timer_seq = 0
        self.hv.tick_hook = self.check_timers

    # -- time ---------------------------------------------------------------

    def now(self) -> int:
        return self.machine.now()

    def arm_timer(self, delay: int, pcpu_id: int = 0) -> int:
        """Schedule an interrupt for the primary vCPU of `pcpu_id` once the
        ledger clock reaches now()+delay.  Returns the deadline."""
        deadline = self.now() + delay
        heapq.heappush(self._timers, (deadline, self._timer_seq, pcpu_id))
        self._timer_seq += 1
        self.trace.emit("timer_armed", pcpu_id,
                        _vcpu_name(self.machine.pcpus[pcpu_id].current_vcpu),
                        self.machine.ledger.snapshot(),
                        deadline=deadline)
        return deadline

    def check_timers(self) -> None:
        """Fire every due timer.  Runs after each costed guest step and may
        be called between driver operations."""
        while self._timers and self._timers[0][0] <= self.now():
            deadline, _, pcpu_id = heapq.heappop(self._timers)
            self.trace.emit("timer_fired", pcpu_id,
                            _vcpu_name(self.machine.pcpus[pcpu_id].current_vcpu),
                            self.machine.ledger.snapshot(),
                            deadline=deadline)
            self.hv.deliver_interrupt(pcpu_id, self.hv.primary.vcpus[pcpu_id])

    # -- guest memory access --------------------------------------------------

    def vm_read(self, vm: Vm, ipa: int, length: int) -> Union[bytes, AccessFault]:
        out, _ = guest_access(self.machine, vm.table, ipa, Access.READ,
                              length=length)
        return out

    def vm_write(self, vm: Vm, ipa: int, data: bytes) -> Union[bytes, AccessFault]:
        out, _ = guest_access(self.machine, vm.table, ipa, Access.WRITE,
                              data=data)
        return out

    def primary_vcpu(self, pcpu_id: int = 0) -> Vcpu:
        return self.hv.primary.vcpus[pcpu_id]

    def write_trace(self, path: str) -> None:
        self.trace.write_jsonl(path)
