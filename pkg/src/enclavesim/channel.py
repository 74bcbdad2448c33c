"""Shared-memory command channel between the primary OS and an enclave.

The channel lives in pages mapped rw into both VMs.  Its layout is a fixed
20-byte header followed by a payload area:

    offset  size  field
    0       4     magic b"BECH"
    4       4     status (u32, ChannelStatus)
    8       4     cmd_id
    12      4     arg_len
    16      4     ret_len
    20      ...   payload (request args, later overwritten by the reply)

Both sides poll; there are no interrupt doorbells.  Memory ordering is
modeled by writing the status word last: a reader that observes REQUEST or
DONE is guaranteed to see the matching payload.  Legal status transitions:

    IDLE -> REQUEST
    REQUEST -> DONE | ERROR | PREEMPTED
    PREEMPTED -> REQUEST          (driver re-arms after resuming the enclave)
    DONE -> REQUEST
    ERROR -> REQUEST

All accesses go through a stage-2 table, so a side that lost its write
mapping faults here like anywhere else.
"""
from __future__ import annotations

import enum
import struct
from typing import Tuple

from .errors import ChannelBusy, ChannelError, ChannelNoRequest, ChannelTooLarge
from .machine import PAGE_SIZE, PhysicalMachine
from .stage2 import Access, AccessFault, Stage2Table, guest_access

CHANNEL_MAGIC = b"BECH"
CHANNEL_HEADER = struct.Struct("<4sIIII")
HEADER_LEN = CHANNEL_HEADER.size  # 20


class ChannelStatus(enum.IntEnum):
    IDLE = 0
    REQUEST = 1
    DONE = 2
    ERROR = 3
    PREEMPTED = 4


LEGAL_TRANSITIONS = {
    (ChannelStatus.IDLE, ChannelStatus.REQUEST),
    (ChannelStatus.REQUEST, ChannelStatus.DONE),
    (ChannelStatus.REQUEST, ChannelStatus.ERROR),
    (ChannelStatus.REQUEST, ChannelStatus.PREEMPTED),
    (ChannelStatus.PREEMPTED, ChannelStatus.REQUEST),
    (ChannelStatus.DONE, ChannelStatus.REQUEST),
    (ChannelStatus.ERROR, ChannelStatus.REQUEST),
}

_STATUS_WORD = struct.Struct("<I")


class ChannelView:
    """One side's handle on a channel region, mediated by that side's
    stage-2 table.  `side` is a label for tracing only."""

    def __init__(self, machine: PhysicalMachine, table: Stage2Table,
                 base_ipa: int, size_pages: int, side: str):
        self.machine = machine
        self.table = table
        self.base_ipa = base_ipa
        self.size_pages = size_pages
        self.side = side

    @property
    def capacity(self) -> int:
        return self.size_pages * PAGE_SIZE - HEADER_LEN

    # -- raw access helpers -------------------------------------------------

    def _read(self, offset: int, length: int) -> bytes:
        out, _ = guest_access(self.machine, self.table, self.base_ipa + offset,
                              Access.READ, length=length)
        if isinstance(out, AccessFault):
            raise ChannelError("channel read fault: %s" % (out.describe(),))
        return out

    def _write(self, offset: int, data: bytes) -> None:
        self.machine.channel_op_depth += 1
        try:
            out, _ = guest_access(self.machine, self.table,
                                  self.base_ipa + offset, Access.WRITE,
                                  data=data)
        finally:
            self.machine.channel_op_depth -= 1
        if isinstance(out, AccessFault):
            raise ChannelError("channel write fault: %s" % (out.describe(),))

    def read_header(self) -> Tuple[bytes, int, int, int, int]:
        return CHANNEL_HEADER.unpack(self._read(0, HEADER_LEN))

    def status(self) -> int:
        return _STATUS_WORD.unpack(self._read(4, 4))[0]

    def _set_status(self, new: ChannelStatus) -> None:
        old_raw = self.status()
        try:
            old = ChannelStatus(old_raw)
        except ValueError:
            raise ChannelError("corrupt channel status %d" % old_raw) from None
        if (old, new) not in LEGAL_TRANSITIONS:
            raise ChannelError("illegal channel transition %s -> %s"
                               % (old.name, new.name))
        self._write(4, _STATUS_WORD.pack(new))
        header = self._read(0, HEADER_LEN)
        _, _, _, arg_len, ret_len = CHANNEL_HEADER.unpack(header)
        if new is ChannelStatus.REQUEST:
            active = min(arg_len, self.capacity)
        elif new in (ChannelStatus.DONE, ChannelStatus.ERROR):
            active = min(ret_len, self.capacity)
        else:
            active = 0
        payload = self._read(HEADER_LEN, active) if active else b""
        for obs in self.machine.observers:
            obs.on_channel(self.side, int(old), int(new), header, payload)

    # -- protocol steps -----------------------------------------------------

    def init(self) -> None:
        """Format the region: zero payload, magic header, status IDLE."""
        self._write(0, CHANNEL_HEADER.pack(CHANNEL_MAGIC, ChannelStatus.IDLE,
                                           0, 0, 0))

    def write_request(self, cmd_id: int, args: bytes) -> None:
        st = self.status()
        if st not in (ChannelStatus.IDLE, ChannelStatus.DONE,
                      ChannelStatus.ERROR):
            raise ChannelBusy("channel status %d, cannot submit" % st)
        if len(args) > self.capacity:
            raise ChannelTooLarge("args %d > capacity %d"
                                  % (len(args), self.capacity))
        self._write(8, struct.pack("<III", cmd_id, len(args), 0))
        if args:
            self._write(HEADER_LEN, args)
        self._set_status(ChannelStatus.REQUEST)

    def serve(self) -> Tuple[int, bytes]:
        """Enclave side: fetch the pending request."""
        magic, st, cmd_id, arg_len, _ = self.read_header()
        if magic != CHANNEL_MAGIC:
            raise ChannelError("bad channel magic %r" % magic)
        if st != ChannelStatus.REQUEST:
            raise ChannelNoRequest("channel status %d, nothing to serve" % st)
        if arg_len > self.capacity:
            raise ChannelError("arg_len %d exceeds capacity" % arg_len)
        args = self._read(HEADER_LEN, arg_len) if arg_len else b""
        return cmd_id, args

    def complete(self, ret: bytes) -> None:
        """Enclave side: publish a successful reply (payload before status)."""
        if len(ret) > self.capacity:
            raise ChannelTooLarge("ret %d > capacity %d"
                                  % (len(ret), self.capacity))
        if ret:
            self._write(HEADER_LEN, ret)
        self._write(16, _STATUS_WORD.pack(len(ret)))
        self._set_status(ChannelStatus.DONE)

    def complete_error(self, ret: bytes = b"") -> None:
        if len(ret) > self.capacity:
            raise ChannelTooLarge("ret %d > capacity %d"
                                  % (len(ret), self.capacity))
        if ret:
            self._write(HEADER_LEN, ret)
        self._write(16, _STATUS_WORD.pack(len(ret)))
        self._set_status(ChannelStatus.ERROR)

    def mark_preempted(self) -> None:
        """Driver side: record that the enclave was interrupted mid-request."""
        self._set_status(ChannelStatus.PREEMPTED)

    def rearm_request(self) -> None:
        """Driver side: flip PREEMPTED back to REQUEST before resuming."""
        self._set_status(ChannelStatus.REQUEST)

    def read_response(self) -> Tuple[ChannelStatus, bytes]:
        """Driver side: read the current (status, payload).  Pure read, never
        raises on state; the status itself tells the caller what happened.
        Payload bytes are returned only for DONE and ERROR."""
        magic, st_raw, _, _, ret_len = self.read_header()
        if magic != CHANNEL_MAGIC:
            raise ChannelError("bad channel magic %r" % magic)
        try:
            st = ChannelStatus(st_raw)
        except ValueError:
            raise ChannelError("corrupt channel status %d" % st_raw) from None
        if st not in (ChannelStatus.DONE, ChannelStatus.ERROR):
            return st, b""
        if ret_len > self.capacity:
            raise ChannelError("ret_len %d exceeds capacity" % ret_len)
        ret = self._read(HEADER_LEN, ret_len) if ret_len else b""
        return st, ret
