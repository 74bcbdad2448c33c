"""Minimal hypervisor: VM records, enclave lifecycle, and vCPU stacking.

The hypervisor owns all stage-2 tables and is the only code that mutates
them.  Enclave VMs are carved out of memory the primary VM donates; the
primary loses its mapping of donated private pages at create time and gets
the (zeroed) pages back at destroy time, so at every instant each frame is
reachable from at most one VM, except channel frames which are deliberately
shared.

Scheduling is a per-pCPU LIFO stack of vCPUs expressed through two links on
each vCPU: ``head`` points at the vCPU stacked immediately above (more
recently scheduled), ``tail`` at the one below.  Invoking an enclave pushes
its vCPU; exiting pops it; an interrupt aimed at a vCPU deeper in the stack
pops everything above it in one context switch.

Guest execution is cooperative.  An enclave vCPU's saved context is a Python
generator that yields ``Work(units)`` to burn simulated time and
``Call(hypercall)`` to trap into the hypervisor; hypercall results are sent
back in, hypercall errors are thrown in.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Dict, Generator, List, Optional, Sequence, Tuple, Union

from .errors import (
    BadHandle,
    EnclaveActive,
    EnclaveDestroyed,
    Exhausted,
    HypercallError,
    InvalidDonation,
    NoParent,
    NotPrimary,
    PageNotMapped,
    PrivilegeViolation,
    SimulationError,
    TooSmall,
    WrongPcpu,
)
from .machine import PAGE_SHIFT, PAGE_SIZE, PhysicalMachine, Pcpu
from .stage2 import PERM_RW, PERM_RWX, Perms, Stage2Table


class VmKind(enum.Enum):
    PRIMARY = "primary"
    ENCLAVE = "enclave"


class VmState(enum.Enum):
    ACTIVE = "active"
    DESTROYED = "destroyed"


class Resumption(enum.Enum):
    """How a vCPU last left the pCPU."""

    COMPLETED = "completed"
    PREEMPTED = "preempted"


# -- guest-visible operation types -------------------------------------------

@dataclass(frozen=True)
class Work:
    """Burn simulated time inside the guest."""

    units: int


@dataclass(frozen=True)
class Hypercall:
    pass


@dataclass(frozen=True)
class ImageMeta:
    """What the image file demands of its donation: the declared private
    memory size and channel size, in pages."""

    mem_size_pages: int
    channel_size_pages: int


@dataclass(frozen=True)
class CreateEnclave(Hypercall):
    pages: Tuple[int, ...]       # primary IPA page numbers, donation order
    meta: ImageMeta              # trailing meta.channel_size_pages are channel


@dataclass(frozen=True)
class DestroyEnclave(Hypercall):
    handle: int


@dataclass(frozen=True)
class InvokeEnclave(Hypercall):
    handle: int


@dataclass(frozen=True)
class Exit(Hypercall):
    pass


@dataclass(frozen=True)
class Call:
    """Trap into the hypervisor from guest code."""

    hc: Hypercall


GuestOp = Union[Work, Call]
GuestProgram = Generator[GuestOp, object, None]


# -- VM bookkeeping -----------------------------------------------------------

@dataclass(eq=False)
class Vcpu:
    vm: "Vm"
    index: int
    pcpu: int
    head: Optional["Vcpu"] = None   # vCPU stacked above (child)
    tail: Optional["Vcpu"] = None   # vCPU stacked below (parent)
    saved_context: Optional[GuestProgram] = None
    inbox: object = None            # value sent into the generator next
    inbox_exc: Optional[Exception] = None
    pending_irq: bool = False
    halted: bool = False
    last_leave: Optional[Resumption] = None

    @property
    def name(self) -> str:
        return "%s.v%d" % (self.vm.name, self.index)

    def __repr__(self) -> str:
        return "<Vcpu %s>" % self.name


@dataclass(eq=False)
class Vm:
    vmid: int
    kind: VmKind
    name: str
    table: Stage2Table
    state: VmState = VmState.ACTIVE
    vcpus: List[Vcpu] = field(default_factory=list)


@dataclass(frozen=True)
class DonatedPage:
    primary_ipa_page: int
    frame: int
    orig_perms: Perms
    is_channel: bool


@dataclass(eq=False)
class EnclaveRecord:
    handle: int
    vm: Vm
    pages: List[DonatedPage]        # donation order; channel pages last
    channel_pages: int

    @property
    def total_pages(self) -> int:
        return len(self.pages)

    @property
    def private_pages(self) -> int:
        return len(self.pages) - self.channel_pages

    @property
    def channel_ipa(self) -> int:
        """Enclave-side byte address of the channel region."""
        return self.private_pages << PAGE_SHIFT

    def frames(self) -> List[int]:
        return [dp.frame for dp in self.pages]

    def private_frames(self) -> List[int]:
        return [dp.frame for dp in self.pages if not dp.is_channel]

    def channel_frames(self) -> List[int]:
        return [dp.frame for dp in self.pages if dp.is_channel]

    def primary_private_pages(self) -> List[int]:
        """Primary-view IPA pages of the private region (unmapped while the
        enclave lives)."""
        return [dp.primary_ipa_page for dp in self.pages if not dp.is_channel]

    def primary_channel_pages(self) -> List[int]:
        return [dp.primary_ipa_page for dp in self.pages if dp.is_channel]


# Resolves the code blob found in the first donated page to a program
# factory, or None if the image is not recognized.  The factory is called
# once, after the enclave's mappings exist, to instantiate the vCPU context.
ProgramLoader = Callable[[bytes], Optional[Callable[[EnclaveRecord], GuestProgram]]]


class Hypervisor:
    def __init__(self, machine: PhysicalMachine,
                 program_loader: Optional[ProgramLoader] = None):
        self.machine = machine
        self.program_loader = program_loader
        self.tick_hook: Optional[Callable[[], None]] = None
        self.vms: Dict[int, Vm] = {}
        self.enclaves: Dict[int, EnclaveRecord] = {}
        self._next_vmid = 0
        self._next_handle = 1
        self._aux_count = 0
        self._shared_frames: set = set()   # channel frames of live enclaves
        # deliberate defect switches ("skip_zeroize", "remap_before_zeroize"),
        # used by tests to prove the watchdog oracles actually bite
        self.sabotage: set = set()
        self.primary = self._boot_primary()

    # -- boot -----------------------------------------------------------------

    def _boot_primary(self) -> Vm:
        vm = Vm(self._next_vmid, VmKind.PRIMARY, "primary",
                Stage2Table(self._next_vmid, self.machine))
        self._next_vmid += 1
        for i, pcpu in enumerate(self.machine.pcpus):
            vcpu = Vcpu(vm=vm, index=i, pcpu=i)
            vm.vcpus.append(vcpu)
            pcpu.current_vcpu = vcpu
        # the primary starts owning every frame, identity mapped
        for frame in range(self.machine.n_frames):
            vm.table.map(frame, frame, PERM_RWX)
        self.vms[vm.vmid] = vm
        return vm

    # -- stack primitives -------------------------------------------------

    def _charge_switch(self, pcpu: Pcpu, frm: Vcpu, to: Vcpu, reason: str) -> None:
        self.machine.ledger.ctx_switches += 1
        for obs in self.machine.observers:
            obs.on_switch(pcpu.id, frm, to, reason)
        if to.pending_irq:
            to.pending_irq = False
            for obs in self.machine.observers:
                obs.on_interrupt(pcpu.id, to, "taken_on_entry")

    def _push(self, pcpu: Pcpu, child: Vcpu, reason: str) -> None:
        parent = pcpu.current_vcpu
        if parent is None:
            raise SimulationError("pcpu %d has no running vcpu" % pcpu.id)
        if parent.head is not None or child.tail is not None:
            raise SimulationError("stack links corrupt on push")
        parent.head = child
        child.tail = parent
        pcpu.current_vcpu = child
        for obs in self.machine.observers:
            obs.on_push(pcpu.id, child)
        self._charge_switch(pcpu, parent, child, reason)

    def _pop_current(self, pcpu: Pcpu, resumption: Resumption) -> Vcpu:
        """Unlink the running vCPU and fall back to its parent.  Does not
        charge a context switch; the caller decides how many pops share one."""
        cur = pcpu.current_vcpu
        if cur is None:
            raise SimulationError("pcpu %d has no running vcpu" % pcpu.id)
        parent = cur.tail
        if parent is None:
            raise NoParent("vcpu %s has nothing underneath it" % cur.name)
        parent.head = None
        cur.tail = None
        cur.last_leave = resumption
        pcpu.current_vcpu = parent
        for obs in self.machine.observers:
            obs.on_pop(pcpu.id, cur, resumption)
        return cur

    def stack_of(self, pcpu_id: int) -> List[Vcpu]:
        """The vCPU stack on a pCPU, base first, running vCPU last."""
        out: List[Vcpu] = []
        cur = self.machine.pcpus[pcpu_id].current_vcpu
        while cur is not None:
            out.append(cur)
            cur = cur.tail
        out.reverse()
        return out

    @staticmethod
    def _is_ancestor(candidate: Vcpu, of: Vcpu) -> bool:
        cur = of.tail
        while cur is not None:
            if cur is candidate:
                return True
            cur = cur.tail
        return False

    # -- interrupts ---------------------------------------------------------

    def deliver_interrupt(self, pcpu_id: int, target: Vcpu) -> str:
        """Route an interrupt to `target`.  If the target sits below the
        running vCPU, everything above it is popped as PREEMPTED and a single
        context switch lands on the target.  An interrupt for the running
        vCPU itself (or for one not on the stack) is recorded as pending with
        no switch.  Returns the outcome label."""
        if not 0 <= pcpu_id < len(self.machine.pcpus):
            raise SimulationError("no pcpu %d" % pcpu_id)
        if target.pcpu != pcpu_id:
            raise WrongPcpu("vcpu %s lives on pcpu %d, interrupt sent to %d"
                            % (target.name, target.pcpu, pcpu_id))
        pcpu = self.machine.pcpus[pcpu_id]
        cur = pcpu.current_vcpu
        if cur is not None and cur is not target \
                and self._is_ancestor(target, cur):
            frm = cur
            while pcpu.current_vcpu is not target:
                self._pop_current(pcpu, Resumption.PREEMPTED)
            self._charge_switch(pcpu, frm, target, "interrupt")
            outcome = "unwound"
        else:
            target.pending_irq = True
            outcome = "pending"
        for obs in self.machine.observers:
            obs.on_interrupt(pcpu_id, target, outcome)
        return outcome

    # -- hypercall dispatch ---------------------------------------------------

    def dispatch(self, caller: Vcpu, hc: Hypercall):
        self.machine.ledger.hypercalls += 1
        for obs in self.machine.observers:
            obs.on_hypercall(caller, hc)
        try:
            # privilege split: management calls belong to the primary,
            # exit belongs to enclaves
            if isinstance(hc, (CreateEnclave, DestroyEnclave, InvokeEnclave)):
                if caller.vm.kind is not VmKind.PRIMARY:
                    raise PrivilegeViolation(
                        "%s issued by enclave vcpu %s"
                        % (type(hc).__name__, caller.name))
            elif isinstance(hc, Exit):
                if caller.vm.kind is not VmKind.ENCLAVE:
                    raise PrivilegeViolation("exit issued by %s" % caller.name)
            if isinstance(hc, CreateEnclave):
                return self._do_create(caller, hc.pages, hc.meta)
            if isinstance(hc, DestroyEnclave):
                return self._do_destroy(caller, hc.handle)
            if isinstance(hc, InvokeEnclave):
                return self._do_invoke(caller, hc.handle)
            if isinstance(hc, Exit):
                return self._do_exit(caller)
            raise SimulationError("unknown hypercall %r" % (hc,))
        except HypercallError as err:
            for obs in self.machine.observers:
                obs.on_hypercall_error(caller, hc, err)
            raise

    # convenience wrappers for driver-side code
    def create_enclave(self, caller: Vcpu, pages: Sequence[int],
                       meta: ImageMeta) -> int:
        return self.dispatch(caller, CreateEnclave(tuple(pages), meta))

    def destroy_enclave(self, caller: Vcpu, handle: int) -> None:
        self.dispatch(caller, DestroyEnclave(handle))

    def invoke_enclave(self, caller: Vcpu, handle: int) -> Resumption:
        return self.dispatch(caller, InvokeEnclave(handle))

    def _require_primary(self, caller: Vcpu) -> None:
        if caller.vm.kind is not VmKind.PRIMARY:
            raise NotPrimary("hypercall reserved for the primary VM")

    def _lookup(self, handle: int) -> EnclaveRecord:
        rec = self.enclaves.get(handle)
        if rec is None:
            raise BadHandle("no enclave with handle %d" % handle)
        if rec.vm.state is VmState.DESTROYED:
            raise EnclaveDestroyed("enclave %d was destroyed" % handle)
        return rec

    def _live_enclaves(self) -> int:
        return sum(1 for r in self.enclaves.values()
                   if r.vm.state is VmState.ACTIVE)

    # -- create -----------------------------------------------------------

    def _do_create(self, caller: Vcpu, pages: Tuple[int, ...],
                   meta: ImageMeta) -> int:
        """Donate `pages` of the caller's memory to a new enclave.

        The trailing meta.channel_size_pages pages become the shared channel;
        everything else (including any surplus beyond meta.mem_size_pages)
        becomes enclave-private.  Validation happens entirely before the
        first mutation, so any error leaves the primary's table, the enclave
        list and all frame contents exactly as they were.
        """
        self._require_primary(caller)
        channel_pages = meta.channel_size_pages
        if channel_pages < 1 or meta.mem_size_pages < 1:
            raise TooSmall("image needs at least one private and one channel "
                           "page")
        if len(pages) < meta.mem_size_pages + channel_pages:
            raise TooSmall("donated %d pages, image requires %d"
                           % (len(pages),
                              meta.mem_size_pages + channel_pages))
        if len(set(pages)) != len(pages):
            raise InvalidDonation("duplicate page in donation")
        if 1 + self._live_enclaves() + 1 > self.machine.config.max_vms:
            raise Exhausted("VM limit %d reached" % self.machine.config.max_vms)
        ptab = self.primary.table
        staged: List[Tuple[int, int, Perms]] = []
        for p in pages:
            ent = ptab.lookup(p)
            if ent is None:
                raise PageNotMapped("ipa page %#x not mapped in primary" % p)
            frame, perms = ent
            if not perms.write:
                raise InvalidDonation("ipa page %#x not writable; the caller "
                                      "does not own it outright" % p)
            if frame in self._shared_frames:
                raise InvalidDonation("ipa page %#x is another enclave's "
                                      "channel; cannot donate it" % p)
            staged.append((p, frame, perms))
        if self.program_loader is None:
            raise InvalidDonation("no program loader installed")
        factory = self.program_loader(
            self.machine.read_frame(staged[0][1], 0, PAGE_SIZE))
        if factory is None:
            raise InvalidDonation("unrecognized enclave image")

        # mutation starts here; nothing below can fail
        vmid = self._next_vmid
        self._next_vmid += 1
        handle = self._next_handle
        self._next_handle += 1
        vm = Vm(vmid, VmKind.ENCLAVE, "enclave%d" % handle,
                Stage2Table(vmid, self.machine))
        vm.vcpus.append(Vcpu(vm=vm, index=0, pcpu=caller.pcpu))
        n_priv = len(pages) - channel_pages
        donated: List[DonatedPage] = []
        for i, (p, frame, perms) in enumerate(staged):
            if i < n_priv:
                ptab.unmap(p)
                vm.table.map(i, frame, PERM_RWX)
            else:
                # channel stays mapped in the primary, data only, no exec
                ptab.protect(p, PERM_RW)
                vm.table.map(i, frame, PERM_RW)
                self._shared_frames.add(frame)
            donated.append(DonatedPage(p, frame, perms, i >= n_priv))
        rec = EnclaveRecord(handle, vm, donated, channel_pages)
        self.vms[vmid] = vm
        self.enclaves[handle] = rec
        vm.vcpus[0].saved_context = factory(rec)
        return handle

    # -- destroy ------------------------------------------------------------

    def _do_destroy(self, caller: Vcpu, handle: int) -> None:
        """Tear down an enclave.  Every donated frame is zeroed before any
        mapping changes, so no frame ever re-enters the primary carrying
        enclave data."""
        self._require_primary(caller)
        rec = self._lookup(handle)
        vcpu = rec.vm.vcpus[0]
        pcpu = self.machine.pcpus[vcpu.pcpu]
        if vcpu.tail is not None or pcpu.current_vcpu is vcpu:
            raise EnclaveActive("enclave %d is scheduled on pcpu %d"
                                % (handle, vcpu.pcpu))
        if "remap_before_zeroize" in self.sabotage:
            self._teardown_remap(rec)
            self._teardown_zeroize(rec)
        else:
            if "skip_zeroize" not in self.sabotage:
                self._teardown_zeroize(rec)
            self._teardown_remap(rec)
        rec.vm.state = VmState.DESTROYED
        for dp in rec.pages:
            if dp.is_channel:
                self._shared_frames.discard(dp.frame)
        if vcpu.saved_context is not None:
            vcpu.saved_context.close()
            vcpu.saved_context = None
        vcpu.halted = True

    def _teardown_zeroize(self, rec: EnclaveRecord) -> None:
        for dp in rec.pages:
            self.machine.zero_frame(dp.frame)

    def _teardown_remap(self, rec: EnclaveRecord) -> None:
        for i in range(len(rec.pages)):
            rec.vm.table.unmap(i)
        ptab = self.primary.table
        for dp in rec.pages:
            if dp.is_channel:
                ptab.protect(dp.primary_ipa_page, dp.orig_perms)
            else:
                ptab.map(dp.primary_ipa_page, dp.frame, dp.orig_perms)

    # -- invoke / exit ------------------------------------------------------

    def _do_invoke(self, caller: Vcpu, handle: int) -> Resumption:
        self._require_primary(caller)
        rec = self._lookup(handle)
        target = rec.vm.vcpus[0]
        if target.pcpu != caller.pcpu:
            raise WrongPcpu("enclave %d pinned to pcpu %d, invoked from %d"
                            % (handle, target.pcpu, caller.pcpu))
        pcpu = self.machine.pcpus[caller.pcpu]
        if pcpu.current_vcpu is not caller:
            raise SimulationError("invoke from a vcpu that is not running")
        if target.tail is not None or pcpu.current_vcpu is target:
            raise EnclaveActive("enclave %d already scheduled" % handle)
        self._push(pcpu, target, "invoke")
        self._run_until(pcpu, caller)
        return target.last_leave

    def _do_exit(self, caller: Vcpu) -> None:
        pcpu = self.machine.pcpus[caller.pcpu]
        if pcpu.current_vcpu is not caller:
            raise SimulationError("exit from a vcpu that is not running")
        popped = self._pop_current(pcpu, Resumption.COMPLETED)
        self._charge_switch(pcpu, popped, pcpu.current_vcpu, "exit")

    # -- cooperative run loop -------------------------------------------------

    def _tick(self) -> None:
        if self.tick_hook is not None:
            self.tick_hook()

    def _run_until(self, pcpu: Pcpu, stop: Vcpu) -> None:
        """Advance the running guest until `stop` is back on the pCPU."""
        while pcpu.current_vcpu is not stop:
            cur = pcpu.current_vcpu
            gen = cur.saved_context
            if gen is None:
                raise SimulationError("vcpu %s scheduled with no context"
                                      % cur.name)
            try:
                if cur.inbox_exc is not None:
                    exc, cur.inbox_exc = cur.inbox_exc, None
                    item = gen.throw(exc)
                else:
                    value, cur.inbox = cur.inbox, None
                    item = gen.send(value)
            except StopIteration:
                # program finished: an implicit exit, no hypercall charged
                cur.halted = True
                popped = self._pop_current(pcpu, Resumption.COMPLETED)
                self._charge_switch(pcpu, popped, pcpu.current_vcpu, "finish")
                continue
            if isinstance(item, Work):
                if item.units < 0:
                    raise SimulationError("negative work")
                self.machine.ledger.work_units += item.units
                for obs in self.machine.observers:
                    obs.on_work(cur, item.units)
                self._tick()
            elif isinstance(item, Call):
                try:
                    cur.inbox = self.dispatch(cur, item.hc)
                except HypercallError as err:
                    cur.inbox_exc = err
                self._tick()
            else:
                raise SimulationError("guest %s yielded %r" % (cur.name, item))

    # -- raw scheduling for tests and demos -----------------------------------

    def make_aux_vcpu(self, pcpu_id: int, name: Optional[str] = None) -> Vcpu:
        """A schedulable vCPU with no memory and no program, for exercising
        the stacking machinery directly."""
        self._aux_count += 1
        label = name or ("aux%d" % self._aux_count)
        vm = Vm(self._next_vmid, VmKind.ENCLAVE, label,
                Stage2Table(self._next_vmid, self.machine))
        self._next_vmid += 1
        vcpu = Vcpu(vm=vm, index=0, pcpu=pcpu_id)
        vm.vcpus.append(vcpu)
        self.vms[vm.vmid] = vm
        return vcpu

    def schedule_vcpu(self, pcpu_id: int, vcpu: Vcpu) -> None:
        """Push `vcpu` onto a pCPU's stack without privilege checks."""
        if vcpu.pcpu != pcpu_id:
            raise WrongPcpu("vcpu %s pinned to pcpu %d" % (vcpu.name, vcpu.pcpu))
        pcpu = self.machine.pcpus[pcpu_id]
        if vcpu.tail is not None or pcpu.current_vcpu is vcpu:
            raise EnclaveActive("vcpu %s already scheduled" % vcpu.name)
        self._push(pcpu, vcpu, "schedule")

    def yield_vcpu(self, pcpu_id: int,
                   resumption: Resumption = Resumption.COMPLETED) -> Vcpu:
        """Pop the running vCPU without touching its program state."""
        pcpu = self.machine.pcpus[pcpu_id]
        popped = self._pop_current(pcpu, resumption)
        self._charge_switch(pcpu, popped, pcpu.current_vcpu, "yield")
        return popped
