"""Primary-VM software model: a toy page allocator and the enclave driver.

The driver is the application-facing API: it allocates pages, copies an
image's code blob into them through the primary's own stage-2 mappings,
donates the pages via hypercall, and afterwards speaks the shared-memory
channel protocol.  It deliberately runs entirely at guest level: everything
it does goes through the same translation path an application would use, so
a driver bug cannot touch memory the primary does not own.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .channel import ChannelStatus, ChannelView
from .errors import BadFd, DriverError, Exhausted, HypercallError, NoMemory
from .hypervisor import EnclaveRecord, ImageMeta, Resumption
from .image import EnclaveImage
from .machine import PAGE_SHIFT, PAGE_SIZE
from .sim import Simulation
from .stage2 import AccessFault

FD_BASE = 3
FD_CAPACITY = 16


class OsAllocator:
    """Free-list page allocator over the primary's donation-eligible region.

    Pages are handed out lowest-numbered first; allocations are tracked by
    id so conservation (free + allocated = constant) is checkable from the
    outside.  Freeing the most recent allocation also rolls the id counter
    back, which keeps error paths perfectly invisible in later ids.
    """

    def __init__(self, first_page: int, end_page: int):
        self.region = (first_page, end_page)
        self._free: List[int] = list(range(first_page, end_page))
        self.allocations: Dict[int, List[int]] = {}
        self._next_aid = 1

    @property
    def free_count(self) -> int:
        return len(self._free)

    def total_tracked(self) -> int:
        return len(self._free) + sum(len(p) for p in self.allocations.values())

    def snapshot(self) -> tuple:
        return (tuple(self._free),
                tuple(sorted((aid, tuple(pages))
                             for aid, pages in self.allocations.items())),
                self._next_aid)

    def _take(self, pages: List[int]) -> Tuple[int, List[int]]:
        for p in pages:
            self._free.remove(p)
        aid = self._next_aid
        self._next_aid += 1
        self.allocations[aid] = list(pages)
        return aid, list(pages)

    def allocate(self, n: int) -> Tuple[int, List[int]]:
        if n < 1:
            raise DriverError("allocation of %d pages" % n)
        if n > len(self._free):
            raise NoMemory("%d pages requested, %d free" % (n, len(self._free)))
        return self._take(self._free[:n])

    def allocate_contiguous(self, n: int) -> Tuple[int, List[int]]:
        if n < 1:
            raise DriverError("allocation of %d pages" % n)
        run_start = 0
        for i in range(1, len(self._free) + 1):
            if i == len(self._free) or self._free[i] != self._free[i - 1] + 1:
                if i - run_start >= n:
                    pages = self._free[run_start:run_start + n]
                    return self._take(pages)
                run_start = i
        raise NoMemory("no contiguous run of %d pages" % n)

    def free(self, aid: int) -> List[int]:
        pages = self.allocations.pop(aid, None)
        if pages is None:
            raise DriverError("free of unknown allocation %d" % aid)
        for p in pages:
            self._insort(p)
        if aid == self._next_aid - 1:
            self._next_aid = aid
        return pages

    def _insort(self, page: int) -> None:
        idx = bisect.bisect_left(self._free, page)
        if idx < len(self._free) and self._free[idx] == page:
            raise DriverError("double free of page %#x" % page)
        self._free.insert(idx, page)


@dataclass
class EnclaveFd:
    fd: int
    handle: int
    image: EnclaveImage
    priv_aid: int
    chan_aid: int
    priv_pages: List[int] = field(default_factory=list)
    chan_pages: List[int] = field(default_factory=list)
    channel: Optional[ChannelView] = None

    @property
    def channel_ipa(self) -> int:
        """Primary-view byte address of the channel region."""
        return self.chan_pages[0] << PAGE_SHIFT


class EnclaveDriver:
    """Create / invoke / resume / destroy, with rollback on failure."""

    def __init__(self, sim: Simulation, pcpu_id: int = 0):
        self.sim = sim
        self.hv = sim.hv
        self.pcpu_id = pcpu_id
        cfg = sim.machine.config
        self.allocator = OsAllocator(cfg.os_reserved_pages, cfg.frames)
        self._fds: Dict[int, EnclaveFd] = {}

    # -- fd bookkeeping -------------------------------------------------------

    def _alloc_fd(self) -> int:
        for fd in range(FD_BASE, FD_BASE + FD_CAPACITY):
            if fd not in self._fds:
                return fd
        raise Exhausted("driver fd table full (%d live)" % FD_CAPACITY)

    def _get(self, fd: int) -> EnclaveFd:
        rec = self._fds.get(fd)
        if rec is None:
            raise BadFd("no enclave behind fd %d" % fd)
        return rec

    def open_fds(self) -> List[int]:
        return sorted(self._fds)

    def fd_info(self, fd: int) -> EnclaveFd:
        return self._get(fd)

    # -- lifecycle ------------------------------------------------------------

    def _load_blob(self, image: EnclaveImage, pages: List[int]) -> None:
        """Copy the code blob into the first pages and zero-fill the rest of
        the private region, all through the primary's own mappings."""
        blob = image.code_blob
        primary = self.hv.primary
        for i, page in enumerate(pages):
            chunk = blob[i * PAGE_SIZE:(i + 1) * PAGE_SIZE]
            if len(chunk) < PAGE_SIZE:
                chunk = chunk + bytes(PAGE_SIZE - len(chunk))
            out = self.sim.vm_write(primary, page << PAGE_SHIFT, chunk)
            if isinstance(out, AccessFault):
                raise DriverError("faulted writing own page %#x" % page)

    def create(self, image: EnclaveImage) -> int:
        fd = self._alloc_fd()
        priv_aid, priv = self.allocator.allocate(image.mem_size_pages)
        try:
            chan_aid, chan = self.allocator.allocate_contiguous(
                image.channel_size_pages)
        except NoMemory:
            self.allocator.free(priv_aid)
            raise
        try:
            self._load_blob(image, priv)
            meta = ImageMeta(image.mem_size_pages, image.channel_size_pages)
            handle = self.hv.create_enclave(
                self.sim.primary_vcpu(self.pcpu_id), priv + chan, meta)
        except (HypercallError, DriverError):
            # undo in reverse order so allocation ids roll back too
            self.allocator.free(chan_aid)
            self.allocator.free(priv_aid)
            raise
        rec = EnclaveFd(fd, handle, image, priv_aid, chan_aid, priv, chan)
        rec.channel = ChannelView(self.sim.machine, self.hv.primary.table,
                                  rec.channel_ipa, image.channel_size_pages,
                                  "primary")
        rec.channel.init()
        self._fds[fd] = rec
        return fd

    def invoke(self, fd: int, cmd_id: int,
               args: bytes = b"") -> Tuple[ChannelStatus, bytes]:
        rec = self._get(fd)
        rec.channel.write_request(cmd_id, args)
        outcome = self.hv.invoke_enclave(self.sim.primary_vcpu(self.pcpu_id),
                                         rec.handle)
        return self._collect(rec, outcome)

    def resume(self, fd: int) -> Tuple[ChannelStatus, bytes]:
        """Re-enter an enclave that was interrupted mid-command."""
        rec = self._get(fd)
        if rec.channel.status() != ChannelStatus.PREEMPTED:
            raise DriverError("resume with channel status %d"
                              % rec.channel.status())
        rec.channel.rearm_request()
        outcome = self.hv.invoke_enclave(self.sim.primary_vcpu(self.pcpu_id),
                                         rec.handle)
        return self._collect(rec, outcome)

    def _collect(self, rec: EnclaveFd,
                 outcome: Resumption) -> Tuple[ChannelStatus, bytes]:
        if outcome is Resumption.PREEMPTED:
            # the TA never saw the end of the request; record that for the
            # application, which may call resume() later
            rec.channel.mark_preempted()
            return ChannelStatus.PREEMPTED, b""
        return rec.channel.read_response()

    def destroy(self, fd: int) -> None:
        rec = self._get(fd)
        self.hv.destroy_enclave(self.sim.primary_vcpu(self.pcpu_id), rec.handle)
        self.allocator.free(rec.chan_aid)
        self.allocator.free(rec.priv_aid)
        del self._fds[fd]

    def record_of(self, fd: int) -> EnclaveRecord:
        return self.hv.enclaves[self._get(fd).handle]
