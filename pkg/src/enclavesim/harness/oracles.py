"""Shadow-state oracles.

Each oracle rebuilds some slice of simulator state from primary evidence
(observer callbacks, raw frame bytes, the event trace) and compares it
against what the simulator reports.  None of them read the hypervisor's
private sets or counters; if the hypervisor lies, the oracle should be in a
position to notice.
"""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Set, Tuple

from ..hypervisor import Hypervisor, Vcpu, VmKind, VmState
from ..machine import PAGE_SIZE, Observer, PhysicalMachine
from ..stage2 import Perms


class TraceGapError(AssertionError):
    """The event trace and the cost ledger disagree."""


# -- physical memory shadow ---------------------------------------------------

class MemoryOracle(Observer):
    """Mirror of frame contents built purely from write/zero callbacks.

    If any code path mutates a frame without going through the machine's
    write or zero primitives, the mirror and the real memory drift apart and
    verify() reports the frame.
    """

    def __init__(self, machine: PhysicalMachine):
        self.machine = machine
        self._shadow: Dict[int, bytearray] = {}

    def _frame(self, frame: int) -> bytearray:
        buf = self._shadow.get(frame)
        if buf is None:
            buf = bytearray(PAGE_SIZE)
            self._shadow[frame] = buf
        return buf

    def on_write(self, frame: int, offset: int, data: bytes) -> None:
        self._frame(frame)[offset:offset + len(data)] = data

    def on_zero(self, frame: int) -> None:
        self._shadow[frame] = bytearray(PAGE_SIZE)

    def verify(self) -> List[str]:
        """Compare the mirror to physical memory; untouched frames must
        still hold their boot-time zeros."""
        problems = []
        for frame in range(self.machine.n_frames):
            real = self.machine.read_frame(frame, 0, PAGE_SIZE)
            mirrored = self._shadow.get(frame)
            if mirrored is None:
                if any(real):
                    problems.append("frame %d modified with no write event"
                                    % frame)
            elif bytes(mirrored) != real:
                problems.append("frame %d diverges from write history" % frame)
        return problems


# -- mapping exclusivity ------------------------------------------------------

def _mappers(hv: Hypervisor) -> Dict[int, List[Tuple[int, VmKind, Perms]]]:
    """frame -> [(vmid, kind, perms)] over every live VM's table."""
    owners: Dict[int, List[Tuple[int, VmKind, Perms]]] = {}
    for vm in hv.vms.values():
        for ipa_page, (frame, perms) in vm.table.snapshot().items():
            owners.setdefault(frame, []).append((vm.vmid, vm.kind, perms))
    return owners


def check_frame_exclusivity(hv: Hypervisor,
                            shared_expected: Optional[Set[int]] = None) -> List[str]:
    """Every frame is reachable from at most one VM, except an explicitly
    shared channel frame which must be reachable from exactly the primary
    and one enclave, data-only on both sides.

    `shared_expected`, when given, comes from OS-level bookkeeping (the
    driver's channel allocations) so the allowed sharing is cross-checked
    against a second source instead of trusted.
    """
    problems = []
    for vm in hv.vms.values():
        if vm.state is VmState.DESTROYED and len(vm.table) != 0:
            problems.append("destroyed vm%d still maps %d pages"
                            % (vm.vmid, len(vm.table)))
    shared_seen: Set[int] = set()
    for frame, owners in _mappers(hv).items():
        if len(owners) <= 1:
            continue
        shared_seen.add(frame)
        kinds = sorted(kind.value for _, kind, _ in owners)
        if len(owners) != 2 or kinds != ["enclave", "primary"]:
            problems.append("frame %d mapped by %s" % (
                frame, [(vmid, kind.value) for vmid, kind, _ in owners]))
            continue
        for vmid, _, perms in owners:
            if perms.execute or not (perms.read and perms.write):
                problems.append("shared frame %d has perms %s in vm%d"
                                % (frame, perms.tag(), vmid))
        if shared_expected is not None and frame not in shared_expected:
            problems.append("frame %d shared but not a known channel" % frame)
    if shared_expected is not None:
        for frame in sorted(shared_expected - shared_seen):
            problems.append("channel frame %d not visible to both sides"
                            % frame)
    return problems


# -- vCPU stack structure -----------------------------------------------------

def check_stack_integrity(hv: Hypervisor) -> List[str]:
    """Walk every pCPU stack through the raw links and check the doubly
    linked shape: symmetric links, no cycles, primary at the base, nothing
    above the running vCPU, and clean links on every idle vCPU."""
    problems = []
    on_stack: Set[int] = set()
    for pcpu in hv.machine.pcpus:
        cur = pcpu.current_vcpu
        if cur is None:
            continue
        if cur.head is not None:
            problems.append("pcpu %d running %s which still has a child"
                            % (pcpu.id, cur.name))
        seen: List[Vcpu] = []
        node = cur
        while node is not None:
            if any(node is s for s in seen):
                problems.append("pcpu %d stack has a cycle at %s"
                                % (pcpu.id, node.name))
                break
            seen.append(node)
            on_stack.add(id(node))
            if node.pcpu != pcpu.id:
                problems.append("%s on pcpu %d stack but pinned to %d"
                                % (node.name, pcpu.id, node.pcpu))
            below = node.tail
            if below is not None and below.head is not node:
                problems.append("asymmetric link between %s and %s"
                                % (node.name, below.name))
            node = below
            if len(seen) > 4096:
                problems.append("pcpu %d stack walk did not terminate"
                                % pcpu.id)
                break
        base = seen[-1] if seen else None
        if base is not None and (base.vm.kind is not VmKind.PRIMARY
                                 or base.pcpu != pcpu.id):
            problems.append("pcpu %d stack base is %s, not its primary vcpu"
                            % (pcpu.id, base.name))
    for vm in hv.vms.values():
        for vcpu in vm.vcpus:
            if id(vcpu) in on_stack:
                continue
            if vcpu.head is not None or vcpu.tail is not None:
                problems.append("idle vcpu %s has dangling stack links"
                                % vcpu.name)
    return problems


class ReferenceStackModel:
    """Plain-list reimplementation of the LIFO scheduling contract.

    Stacks are lists of vCPU names, base first.  The model tracks the same
    observable outcomes the simulator commits to: stack contents, pending
    interrupt flags, interrupt outcome labels, and how many context switches
    each operation charges.  push/pop/interrupt here are written from the
    stated rules, not from the hypervisor code, so the two can disagree.
    """

    def __init__(self, n_pcpus: int, bases: Sequence[str]):
        assert len(bases) == n_pcpus
        self.stacks: List[List[str]] = [[b] for b in bases]
        self.pending: Set[str] = set()
        self.charges = 0

    def _switch_to(self, name: str) -> None:
        self.charges += 1
        self.pending.discard(name)

    def top(self, pcpu: int) -> str:
        return self.stacks[pcpu][-1]

    def stack(self, pcpu: int) -> List[str]:
        return list(self.stacks[pcpu])

    def scheduled(self, pcpu: int) -> Set[str]:
        return set(self.stacks[pcpu])

    def push(self, pcpu: int, name: str) -> None:
        assert name not in self.stacks[pcpu], "model: double schedule"
        self.stacks[pcpu].append(name)
        self._switch_to(name)

    def pop(self, pcpu: int) -> str:
        assert len(self.stacks[pcpu]) > 1, "model: popping the base"
        popped = self.stacks[pcpu].pop()
        self._switch_to(self.top(pcpu))
        return popped

    def interrupt(self, pcpu: int, name: str) -> str:
        stack = self.stacks[pcpu]
        if name in stack[:-1]:
            del stack[stack.index(name) + 1:]
            self._switch_to(name)
            return "unwound"
        self.pending.add(name)
        return "pending"

    def completed_invoke(self, pcpu: int, child: str) -> None:
        """A driver invoke that ran to completion: push plus pop, net stack
        change zero, two switches, pending on the caller consumed."""
        self.push(pcpu, child)
        self.pop(pcpu)


# -- secret scanning ----------------------------------------------------------

class SecretScanner:
    """Looks for known secret byte patterns in physical memory."""

    def __init__(self, machine: PhysicalMachine):
        self.machine = machine

    def scan_frames(self, patterns: Sequence[bytes],
                    frames: Optional[Sequence[int]] = None) -> List[Tuple[int, int, int]]:
        """(frame, offset, pattern_index) for every occurrence."""
        hits = []
        if frames is None:
            frames = range(self.machine.n_frames)
        for frame in frames:
            data = self.machine.read_frame(frame, 0, PAGE_SIZE)
            for pi, pat in enumerate(patterns):
                start = data.find(pat)
                while start >= 0:
                    hits.append((frame, start, pi))
                    start = data.find(pat, start + 1)
        return hits

    def scan_vm_reachable(self, hv: Hypervisor, vmid: int,
                          patterns: Sequence[bytes]) -> List[Tuple[int, int, int]]:
        """Scan only frames the given VM can currently translate to."""
        frames = sorted({frame for frame, _
                         in hv.vms[vmid].table.snapshot().values()})
        return self.scan_frames(patterns, frames)


# -- zeroization watchdog -----------------------------------------------------

class ZeroizeWatch(Observer):
    """Catches enclave memory returning to the primary without being wiped.

    The watchdog follows frames through observer events: a frame unmapped
    from the primary has "left"; when it is mapped back, a zero event must
    have happened in between and the frame must physically read as zeros.
    Channel frames never leave the primary, so for them the check anchors on
    the enclave side: when an enclave unmaps a frame the primary still maps
    (i.e. sharing ends), the frame must have been wiped after sharing began.
    """

    def __init__(self, hv: Hypervisor):
        self.machine = hv.machine
        self._primary_vmid = hv.primary.vmid
        self._in_primary: Set[int] = {
            frame for frame, _ in hv.primary.table.snapshot().values()}
        self._op = 0
        self._away_at: Dict[int, int] = {}
        self._shared_at: Dict[int, int] = {}
        self._last_zero: Dict[int, int] = {}
        self.violations: List[str] = []

    def on_zero(self, frame: int) -> None:
        self._op += 1
        self._last_zero[frame] = self._op

    def on_unmap(self, vm: int, ipa_page: int, frame: int) -> None:
        self._op += 1
        if vm == self._primary_vmid:
            self._in_primary.discard(frame)
            self._away_at[frame] = self._op
            return
        shared_since = self._shared_at.pop(frame, None)
        if shared_since is not None:
            if self._last_zero.get(frame, -1) < shared_since:
                self.violations.append(
                    "channel frame %d unshared without zeroize" % frame)
            elif not self.machine.frame_is_zero(frame):
                self.violations.append(
                    "channel frame %d unshared while dirty" % frame)

    def on_map(self, vm: int, ipa_page: int, frame: int, perms) -> None:
        self._op += 1
        if vm != self._primary_vmid:
            if frame in self._in_primary:
                self._shared_at[frame] = self._op
            return
        left_at = self._away_at.pop(frame, None)
        self._in_primary.add(frame)
        if left_at is None:
            return
        if self._last_zero.get(frame, -1) < left_at:
            self.violations.append(
                "frame %d remapped to primary without zeroize" % frame)
        elif not self.machine.frame_is_zero(frame):
            self.violations.append(
                "frame %d remapped to primary while dirty" % frame)


# -- write confinement --------------------------------------------------------

class WriteConfinementOracle(Observer):
    """Every physical write must land in a frame some running VM may write,
    and writes into shared (channel) frames must come from inside a channel
    protocol operation.

    Mapping state is mirrored from map/unmap/protect events into shadow
    tables plus per-frame counters, so the per-write check is O(pCPUs) and
    never consults the hypervisor's own tables after installation.
    """

    def __init__(self, hv: Hypervisor):
        self.machine = hv.machine
        self._tables: Dict[int, Dict[int, Tuple[int, Perms]]] = {}
        self._map_count: Dict[int, int] = {}
        self._writable: Dict[int, Dict[int, int]] = {}
        self.violations: List[str] = []
        for vm in hv.vms.values():
            for ipa_page, (frame, perms) in vm.table.snapshot().items():
                self._enter(vm.vmid, ipa_page, frame, perms)

    # shadow maintenance
    def _enter(self, vm: int, ipa_page: int, frame: int, perms: Perms) -> None:
        self._tables.setdefault(vm, {})[ipa_page] = (frame, perms)
        self._map_count[frame] = self._map_count.get(frame, 0) + 1
        if perms.write:
            per = self._writable.setdefault(vm, {})
            per[frame] = per.get(frame, 0) + 1

    def _leave(self, vm: int, ipa_page: int) -> None:
        frame, perms = self._tables[vm].pop(ipa_page)
        self._map_count[frame] -= 1
        if perms.write:
            per = self._writable[vm]
            per[frame] -= 1
            if per[frame] == 0:
                del per[frame]

    def on_map(self, vm: int, ipa_page: int, frame: int, perms) -> None:
        self._enter(vm, ipa_page, frame, perms)

    def on_unmap(self, vm: int, ipa_page: int, frame: int) -> None:
        self._leave(vm, ipa_page)

    def on_protect(self, vm: int, ipa_page: int, frame: int, old, new) -> None:
        self._leave(vm, ipa_page)
        self._enter(vm, ipa_page, frame, new)

    def on_write(self, frame: int, offset: int, data: bytes) -> None:
        allowed = False
        for pcpu in self.machine.pcpus:
            cur = pcpu.current_vcpu
            if cur is not None and \
                    self._writable.get(cur.vm.vmid, {}).get(frame, 0) > 0:
                allowed = True
                break
        if not allowed:
            self.violations.append(
                "write to frame %d not writable by any running vcpu" % frame)
            return
        if self._map_count.get(frame, 0) > 1 \
                and self.machine.channel_op_depth == 0:
            self.violations.append(
                "raw write into shared frame %d outside channel protocol"
                % frame)


# -- allocator conservation ---------------------------------------------------

def check_allocator_conservation(allocator) -> List[str]:
    """Free + allocated page sets must tile the region exactly, with the
    free list sorted and duplicate-free."""
    problems = []
    first, end = allocator.region
    free = allocator.snapshot()[0]
    if list(free) != sorted(set(free)):
        problems.append("free list unsorted or duplicated")
    held: Set[int] = set(free)
    for aid, pages in allocator.allocations.items():
        for p in pages:
            if p in held:
                problems.append("page %d both free and in allocation %d"
                                % (p, aid))
            held.add(p)
    expected = set(range(first, end))
    if held != expected:
        missing = sorted(expected - held)[:4]
        extra = sorted(held - expected)[:4]
        problems.append("allocator lost track of pages (missing %s, extra %s)"
                        % (missing, extra))
    return problems


# -- trace completeness -------------------------------------------------------

def check_trace_completeness(sim) -> List[str]:
    """The cost ledger and the event trace are two accounts of the same run;
    every costed unit must have a matching event and vice versa."""
    problems = []
    trace = sim.trace
    ledger = sim.machine.ledger

    steps = [ev.step for ev in trace.events]
    if steps != list(range(len(steps))):
        problems.append("trace steps not dense from zero")

    pt_events = (trace.count("s2_map") + trace.count("s2_unmap")
                 + trace.count("s2_protect"))
    if ledger.pt_ops != pt_events:
        problems.append("pt_ops %d vs %d table events"
                        % (ledger.pt_ops, pt_events))
    zero_events = trace.count("zero_frame")
    if ledger.zero_bytes != zero_events * PAGE_SIZE:
        problems.append("zero_bytes %d vs %d zero events"
                        % (ledger.zero_bytes, zero_events))
    if ledger.ctx_switches != trace.count("ctx_switch"):
        problems.append("ctx_switches %d vs %d switch events"
                        % (ledger.ctx_switches, trace.count("ctx_switch")))
    if ledger.hypercalls != trace.count("hypercall"):
        problems.append("hypercalls %d vs %d hypercall events"
                        % (ledger.hypercalls, trace.count("hypercall")))
    worked = sum(ev.detail["units"] for ev in trace.of_kind("work"))
    if ledger.work_units != worked:
        problems.append("work_units %d vs %d in work events"
                        % (ledger.work_units, worked))
    if sim.machine.fault_count != trace.count("fault"):
        problems.append("%d faults served vs %d fault events"
                        % (sim.machine.fault_count, trace.count("fault")))
    return problems


def standard_checks(sim, driver=None,
                    shared_expected: Optional[Set[int]] = None) -> List[str]:
    """The battery run at scenario/fuzz checkpoints."""
    problems = []
    problems += check_stack_integrity(sim.hv)
    problems += check_frame_exclusivity(sim.hv, shared_expected)
    problems += check_trace_completeness(sim)
    if driver is not None:
        problems += check_allocator_conservation(driver.allocator)
    return problems
