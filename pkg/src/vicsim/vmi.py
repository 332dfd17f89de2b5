"""Host-side introspection surface: translated reads/writes, watches, event pump.

Host accesses go straight to host frames through the SLAT mapping.  They never
trap, never charge the guest and never touch the guest clock.
"""
from __future__ import annotations

import heapq
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import HugePageUnsupported, NonCanonicalAddress, PageNotPresent, SessionBusy
from .paging import GuestMemory, ProcessContext
from .slat_events import FRAME_SIZE, Access, MemoryEvent, PageSize, spp_bitmap_for

DEFAULT_WATCH_KINDS = (Access.WRITE, Access.EXECUTE)


@dataclass(frozen=True)
class WatchHandle:
    watch_id: int
    pid: int
    gva: int
    length: int
    uses_spp: bool
    guard_ids: tuple


@dataclass(frozen=True)
class Delivery:
    watch_id: int
    event: MemoryEvent
    result: object


class VmiSession:
    """Exclusive introspection session on one guest.

    ``driver`` is whatever advances the co-simulation by one tick; it must
    expose ``now`` and ``step()``.  Without a driver, :meth:`pump_events` only
    drains what is already queued.
    """

    def __init__(self, guest: GuestMemory, driver=None):
        if guest.vmi_session is not None:
            raise SessionBusy("guest already has an introspection session")
        guest.vmi_session = self
        self.guest = guest
        self.driver = driver
        self._queue: list = []
        self._seq = 0
        self._watches: dict[int, tuple[WatchHandle, Callable]] = {}
        self._next_watch = 1
        self.current_task = "main"
        self.reads_by_task: Counter = Counter()
        self.writes = 0
        self.closed = False

    def close(self) -> None:
        for wid in list(self._watches):
            self.unregister_watch(wid)
        if self.guest.vmi_session is self:
            self.guest.vmi_session = None
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def now(self) -> int:
        return self.guest.now

    def process(self, name: str) -> ProcessContext:
        return self.guest.process(name)

    # -- memory -----------------------------------------------------------

    def vmi_read(self, process_name: str, gva: int, length: int) -> bytes:
        proc = self.guest.process(process_name)
        self.reads_by_task[self.current_task] += 1
        if (gva & 0xFFF) + length <= FRAME_SIZE:
            return self.guest.slat.host_read(self.guest.translate(proc, gva).gpa, length)
        host_read = self.guest.slat.host_read
        return b"".join(host_read(tr.gpa, n) for _, tr, n in self.guest._spans(proc, gva, length))

    def vmi_write(self, process_name: str, gva: int, data: bytes) -> None:
        proc = self.guest.process(process_name)
        self.writes += 1
        spans = self.guest._spans(proc, gva, len(data))
        host_write = self.guest.slat.host_write
        pos = 0
        for _, tr, n in spans:
            host_write(tr.gpa, data[pos:pos + n])
            pos += n

    # -- watches ----------------------------------------------------------

    def register_watch(self, process_name: str, gva: int, length: int, callback: Callable,
                       use_spp: bool = False, kinds=DEFAULT_WATCH_KINDS) -> WatchHandle:
        if not 1 <= length <= 4096:
            raise ValueError("watch length must be in 1..4096")
        proc = self.guest.process(process_name)
        slat = self.guest.slat
        per_entry: dict[int, list] = {}
        entries = {}
        for _, tr, n in self.guest._spans(proc, gva, length):
            for entry, off, m in slat._pieces(tr.gpa, n):
                per_entry.setdefault(entry.gfn, []).append((off, m))
                entries[entry.gfn] = entry
        if use_spp and any(e.size != PageSize.SIZE_4K for e in entries.values()):
            raise HugePageUnsupported("SPP watch on a huge-page mapping")
        watch_id = self._next_watch
        self._next_watch += 1

        def on_event(event, _wid=watch_id):
            self._enqueue(_wid, event)

        guard_ids = []
        for gfn, ranges in per_entry.items():
            gid = slat.set_page_guard(gfn, ranges, kinds, on_event)
            if use_spp:
                slat.set_spp_bitmap(gid, spp_bitmap_for(ranges))
            guard_ids.append(gid)
        handle = WatchHandle(watch_id, proc.pid, gva, length, use_spp, tuple(guard_ids))
        self._watches[watch_id] = (handle, callback)
        return handle

    def unregister_watch(self, handle) -> None:
        wid = handle.watch_id if isinstance(handle, WatchHandle) else handle
        h, _ = self._watches.pop(wid)
        for gid in h.guard_ids:
            self.guest.slat.remove_guard(gid)

    @property
    def watches(self) -> list[WatchHandle]:
        return [h for h, _ in self._watches.values()]

    # -- events -----------------------------------------------------------

    def _enqueue(self, watch_id: int, event: MemoryEvent) -> None:
        heapq.heappush(self._queue, (event.timestamp, self._seq, watch_id, event))
        self._seq += 1

    def pending(self) -> int:
        return len(self._queue)

    def deliver_pending(self, upto: Optional[int] = None) -> list[Delivery]:
        """Hand queued events with timestamp <= ``upto`` to their callbacks."""
        out = []
        q = self._queue
        while q and (upto is None or q[0][0] <= upto):
            _, _, wid, event = heapq.heappop(q)
            watch = self._watches.get(wid)
            if watch is None:
                continue
            out.append(Delivery(wid, event, watch[1](event)))
        return out

    def pump_events(self, max_logical_time: int) -> list[Delivery]:
        delivered = []
        driver = self.driver
        while driver is not None and driver.now < max_logical_time:
            step = driver.step()
            if step:
                delivered.extend(step)
        delivered.extend(self.deliver_pending(max_logical_time))
        return delivered


def read_exact(session: VmiSession, process_name: str, gva: int, length: int) -> Optional[bytes]:
    """vmi_read that returns None instead of raising on an unmapped page."""
    try:
        return session.vmi_read(process_name, gva, length)
    except (PageNotPresent, NonCanonicalAddress):
        return None
