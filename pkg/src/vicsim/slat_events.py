"""Second-level address translation, page guards and the trap cost ledger.

Every guest memory access funnels through :meth:`SlatTable.access`.  A frame
carrying a page guard has the guarded access kinds stripped from its
permissions, so any access of such a kind to *any* offset inside the frame
exits to the hypervisor.  The exit is emulated atomically (perms suspended,
access performed, guard re-armed) and charged ``vmexit_cost_us`` to the guest.
Only events whose byte range intersects a watch range are handed to callbacks.
"""
from __future__ import annotations

import enum
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

from .errors import (
    DuplicateMapping,
    HugePageUnsupported,
    NoSuchGuard,
    RecursiveGuestEntry,
    SlatViolationUnhandled,
    UnmappedFrame,
)

FRAME_SHIFT = 12
FRAME_SIZE = 1 << FRAME_SHIFT
SPP_GRANULE = 128
SPP_FULL = (1 << (FRAME_SIZE // SPP_GRANULE)) - 1


class PageSize(enum.IntEnum):
    SIZE_4K = 1 << 12
    SIZE_2M = 1 << 21
    SIZE_1G = 1 << 30


class Access(str, enum.Enum):
    READ = "read"
    WRITE = "write"
    EXECUTE = "execute"


ALL_KINDS = frozenset(Access)


def _kinds(kinds) -> frozenset:
    if isinstance(kinds, (str, Access)):
        kinds = [kinds]
    return frozenset(Access(k) for k in kinds)


@dataclass(frozen=True)
class CostModel:
    """Simulated time charged to the guest per memory access.

    ``vmexit_cost_us`` covers the whole stall a trapped access imposes on the
    vCPU: the exit itself, delivery of the event to the host introspection
    client and the resume.  Costs are kept internally as integer nanoseconds
    so the ledger is exact.
    """

    vmexit_cost_us: float = 3000.0
    baseline_access_cost_us: float = 0.1
    tsc_offset_enabled: bool = False

    def __post_init__(self):
        if self.baseline_access_cost_us < 0:
            raise ValueError("baseline_access_cost_us must be >= 0")
        if self.vmexit_cost_us < self.baseline_access_cost_us:
            raise ValueError("vmexit_cost_us must not be below the baseline access cost")
        for name in ("vmexit_cost_us", "baseline_access_cost_us"):
            ns = getattr(self, name) * 1000
            if abs(ns - round(ns)) > 1e-6:
                raise ValueError(f"{name} must be a whole number of nanoseconds")

    @property
    def vmexit_ns(self) -> int:
        return round(self.vmexit_cost_us * 1000)

    @property
    def baseline_ns(self) -> int:
        return round(self.baseline_access_cost_us * 1000)


@dataclass(frozen=True)
class MemoryEvent:
    gpa: int
    gva: int
    pid: int
    kind: Access
    length: int
    old_value: Optional[bytes]
    new_value: Optional[bytes]
    relevant: bool
    timestamp: int
    cost_us: float


@dataclass(eq=False)
class PageGuard:
    guard_id: int
    gfn: int
    watch_ranges: tuple
    kinds: frozenset
    callback: Optional[Callable[[MemoryEvent], object]]
    spp_bitmap: Optional[int] = None

    def intersects(self, offset: int, length: int) -> bool:
        end = offset + length
        return any(o < end and offset < o + n for o, n in self.watch_ranges)


@dataclass(eq=False)
class SlatEntry:
    gfn: int
    host_frame: int
    size: int
    perms: frozenset
    store: bytearray
    guards: list = field(default_factory=list)

    def __post_init__(self):
        self.base = self.gfn << FRAME_SHIFT
        # frames holding guest page tables invalidate the walk cache on store
        self.page_table = False

    @property
    def guarded(self) -> bool:
        return bool(self.guards)

    @property
    def spp_bitmap(self) -> Optional[int]:
        # Combined view over all guards; any unrestricted guard disables SPP.
        if not self.guards or any(g.spp_bitmap is None for g in self.guards):
            return None
        bitmap = 0
        for g in self.guards:
            bitmap |= g.spp_bitmap
        return bitmap

    @property
    def effective_perms(self) -> frozenset:
        stripped = frozenset().union(*(g.kinds for g in self.guards)) if self.guards else frozenset()
        return self.perms - stripped


class AccessOutcome(NamedTuple):
    data: Optional[bytes]
    cost_ns: int
    trapped: bool
    events: list

    @property
    def cost_us(self) -> float:
        return self.cost_ns / 1000


class HostMemory:
    """Host physical frame store, indexed by host frame number."""

    def __init__(self):
        self.frames: dict[int, bytearray] = {}

    def frame(self, index: int, size: int = FRAME_SIZE) -> bytearray:
        store = self.frames.get(index)
        if store is None:
            store = self.frames[index] = bytearray(size)
        elif len(store) != size:
            raise DuplicateMapping(f"host frame {index} already backs a {len(store)}-byte mapping")
        return store

    def write(self, index: int, offset: int, data: bytes) -> None:
        store = self.frame(index)
        store[offset:offset + len(data)] = data

    def read(self, index: int, offset: int, length: int) -> bytes:
        return bytes(self.frame(index)[offset:offset + length])


class MemoryEncryption:
    """Keyed per-frame XOR keystream; stands in for SEV/TDX-style encryption."""

    def __init__(self, key: int):
        self.key = key
        self.gfns: set[int] = set()
        self._streams: dict[int, int] = {}

    def covers(self, gfn: int) -> bool:
        return gfn in self.gfns

    def _stream(self, gfn: int) -> int:
        ks = self._streams.get(gfn)
        if ks is None:
            seed = self.key.to_bytes(8, "little", signed=False) + gfn.to_bytes(8, "little")
            blocks = [hashlib.blake2b(seed + i.to_bytes(4, "little"), digest_size=64).digest()
                      for i in range(FRAME_SIZE // 64)]
            ks = self._streams[gfn] = int.from_bytes(b"".join(blocks), "little")
        return ks

    def transform(self, gpa: int, data: bytes) -> bytes:
        out = []
        pos = 0
        while pos < len(data):
            addr = gpa + pos
            gfn, off = addr >> FRAME_SHIFT, addr & (FRAME_SIZE - 1)
            n = min(len(data) - pos, FRAME_SIZE - off)
            chunk = data[pos:pos + n]
            if gfn in self.gfns:
                ks = (self._stream(gfn) >> (off * 8)) & ((1 << (n * 8)) - 1)
                chunk = (int.from_bytes(chunk, "little") ^ ks).to_bytes(n, "little")
            out.append(chunk)
            pos += n
        return b"".join(out)


def spp_mask(offset: int, length: int) -> int:
    first = offset // SPP_GRANULE
    last = (offset + length - 1) // SPP_GRANULE
    return ((1 << (last - first + 1)) - 1) << first


def spp_bitmap_for(ranges) -> int:
    bitmap = 0
    for off, n in ranges:
        bitmap |= spp_mask(off, n)
    return bitmap & SPP_FULL


class SlatTable:
    """Guest-physical to host-physical map plus the trap-and-emulate funnel."""

    def __init__(self, cost: Optional[CostModel] = None, host: Optional[HostMemory] = None,
                 deliver_irrelevant: bool = False):
        self.cost = cost or CostModel()
        self.host = host or HostMemory()
        self.deliver_irrelevant = deliver_irrelevant
        self.encryption: Optional[MemoryEncryption] = None
        self.now = 0
        self._entries: dict[int, SlatEntry] = {}
        self._guards: dict[int, tuple[PageGuard, SlatEntry]] = {}
        self._next_guard = 1
        self._in_trap = False
        self.walk_cache: dict = {}
        self._vmexit_ns = self.cost.vmexit_ns
        self._baseline_ns = self.cost.baseline_ns
        # the hypervisor's clock policy; an installed profile may override it
        self.tsc_offset_enabled = self.cost.tsc_offset_enabled
        # ledger
        self.n_trapped = 0
        self.n_untrapped = 0
        self.charged_ns = 0
        self.visible_ns = 0
        self.tick_charge_ns = 0
        self.n_events = 0
        self.n_relevant = 0
        self.events_by_frame: Counter = Counter()
        self.event_log: Optional[list] = None

    # -- mapping ----------------------------------------------------------

    def slat_map(self, gfn: int, host_frame: int, perms=ALL_KINDS, size: int = PageSize.SIZE_4K) -> SlatEntry:
        size = int(size)
        nframes = size >> FRAME_SHIFT
        if gfn % nframes:
            raise ValueError(f"gfn {gfn:#x} not aligned to a {size:#x}-byte mapping")
        if any(g in self._entries for g in range(gfn, gfn + nframes)):
            raise DuplicateMapping(f"gfn {gfn:#x} already mapped")
        entry = SlatEntry(gfn, host_frame, size, _kinds(perms), self.host.frame(host_frame, size))
        for g in range(gfn, gfn + nframes):
            self._entries[g] = entry
        return entry

    def slat_unmap(self, gfn: int) -> None:
        entry = self.entry(gfn)
        for g in entry.guards:
            del self._guards[g.guard_id]
        for g in range(entry.gfn, entry.gfn + (entry.size >> FRAME_SHIFT)):
            del self._entries[g]
        self.walk_cache.clear()

    def entry(self, gfn: int) -> SlatEntry:
        try:
            return self._entries[gfn]
        except KeyError:
            raise UnmappedFrame(f"gfn {gfn:#x} has no SLAT entry") from None

    def is_mapped(self, gfn: int) -> bool:
        return gfn in self._entries

    # -- guards -----------------------------------------------------------

    def set_page_guard(self, gfn: int, ranges, kinds=(Access.WRITE,), callback=None) -> int:
        entry = self.entry(gfn)
        ranges = tuple((int(o), int(n)) for o, n in ranges)
        for off, n in ranges:
            if n < 1 or off < 0 or off + n > entry.size:
                raise ValueError(f"watch range ({off:#x}, {n}) outside the {entry.size:#x}-byte frame")
        guard = PageGuard(self._next_guard, entry.gfn, ranges, _kinds(kinds), callback)
        self._next_guard += 1
        entry.guards.append(guard)
        self._guards[guard.guard_id] = (guard, entry)
        return guard.guard_id

    def remove_guard(self, guard_id: int) -> None:
        guard, entry = self._lookup_guard(guard_id)
        entry.guards.remove(guard)
        del self._guards[guard_id]

    def set_spp_bitmap(self, guard_id: int, bitmap: int) -> None:
        guard, entry = self._lookup_guard(guard_id)
        if entry.size != PageSize.SIZE_4K:
            raise HugePageUnsupported("sub-page protection is only defined for 4 KiB frames")
        if not 0 <= bitmap <= SPP_FULL:
            raise ValueError("SPP bitmap must fit in 32 bits")
        guard.spp_bitmap = bitmap

    def guard(self, guard_id: int) -> PageGuard:
        return self._lookup_guard(guard_id)[0]

    def _lookup_guard(self, guard_id: int):
        try:
            return self._guards[guard_id]
        except KeyError:
            raise NoSuchGuard(guard_id) from None

    # -- cost ledger ------------------------------------------------------

    def _charge(self, trapped: bool, count: int = 1) -> int:
        if trapped:
            ns = self._vmexit_ns * count
            self.n_trapped += count
            self.visible_ns += self._baseline_ns * count if self.tsc_offset_enabled else ns
        else:
            ns = self._baseline_ns * count
            self.n_untrapped += count
            self.visible_ns += ns
        self.charged_ns += ns
        self.tick_charge_ns += ns
        return ns

    def drain_tick_charge(self) -> int:
        ns, self.tick_charge_ns = self.tick_charge_ns, 0
        return ns

    def instruction_exits(self, count: int) -> int:
        """Charge ``count`` unconditionally exiting instructions (cpuid and friends)."""
        return self._charge(True, count)

    def plain_instructions(self, count: int) -> int:
        return self._charge(False, count)

    # -- raw physical access (no guards, no cost) -------------------------

    def _pieces(self, gpa: int, length: int):
        while length > 0:
            entry = self._entries.get(gpa >> FRAME_SHIFT)
            if entry is None:
                raise SlatViolationUnhandled(f"gpa {gpa:#x} has no SLAT entry")
            off = gpa - entry.base
            n = min(length, entry.size - off)
            yield entry, off, n
            gpa += n
            length -= n

    def host_read(self, gpa: int, length: int) -> bytes:
        """Stored bytes as the host sees them (ciphertext under encryption)."""
        entry = self._entries.get(gpa >> FRAME_SHIFT)
        if entry is not None:
            off = gpa - entry.base
            if off + length <= entry.size:
                return bytes(entry.store[off:off + length])
        return b"".join(bytes(e.store[o:o + n]) for e, o, n in self._pieces(gpa, length))

    def host_write(self, gpa: int, data: bytes) -> None:
        pos = 0
        for e, o, n in self._pieces(gpa, len(data)):
            if e.page_table:
                self.walk_cache.clear()
            e.store[o:o + n] = data[pos:pos + n]
            pos += n

    def phys_read(self, gpa: int, length: int) -> bytes:
        """Guest-view bytes without trapping; used by the guest MMU walk."""
        raw = self.host_read(gpa, length)
        if self.encryption is not None:
            raw = self.encryption.transform(gpa, raw)
        return raw

    def phys_write(self, gpa: int, data: bytes) -> None:
        if self.encryption is not None:
            data = self.encryption.transform(gpa, data)
        self.host_write(gpa, data)

    # -- the funnel -------------------------------------------------------

    def access(self, pid: int, gva: int, gpa: int, kind, data: Optional[bytes] = None,
               length: Optional[int] = None) -> AccessOutcome:
        if kind.__class__ is not Access:
            kind = Access(kind)
        if kind is Access.WRITE:
            if data is None:
                raise ValueError("write access needs data")
            length = len(data)
        elif length is None:
            length = 1
        if self._in_trap:
            raise RecursiveGuestEntry("guest access from inside a trap callback")
        entry = self._entries.get(gpa >> FRAME_SHIFT)
        if entry is not None:
            off = gpa - entry.base
            if off + length <= entry.size:
                if not entry.guards:
                    if kind is Access.READ:
                        return AccessOutcome(self._load(entry, off, length), self._charge(False), False, [])
                    if kind is Access.WRITE:
                        self._store(entry, off, data)
                    return AccessOutcome(None, self._charge(False), False, [])
                piece, ns, trapped, event = self._access_piece(pid, gva, entry, off, kind, data, length)
                return AccessOutcome(piece, ns, trapped, [event] if event is not None else [])
        out = []
        cost = 0
        trapped_any = False
        events = []
        pos = 0
        for entry, off, n in self._pieces(gpa, length):
            chunk = data[pos:pos + n] if data is not None else None
            piece, ns, trapped, event = self._access_piece(pid, gva + pos, entry, off, kind, chunk, n)
            if piece is not None:
                out.append(piece)
            cost += ns
            trapped_any |= trapped
            if event is not None:
                events.append(event)
            pos += n
        result = b"".join(out) if kind is Access.READ else None
        return AccessOutcome(result, cost, trapped_any, events)

    def write_records(self, pid: int, gva: int, gpa: int, data: bytes, stride: int) -> int:
        """A run of back-to-back ``stride``-byte stores inside one frame.

        Accounting and trapping are per store, exactly as if each record were
        written with :meth:`access`; stores that do not trap move in bulk.
        Returns the number of stores.
        """
        if len(data) % stride:
            raise ValueError("data is not a whole number of records")
        count = len(data) // stride
        entry = self._entries.get(gpa >> FRAME_SHIFT)
        if entry is None or gpa - entry.base + len(data) > entry.size:
            for i in range(0, len(data), stride):
                self.access(pid, gva + i, gpa + i, Access.WRITE, data[i:i + stride])
            return count
        if self._in_trap:
            raise RecursiveGuestEntry("guest access from inside a trap callback")
        base = gpa - entry.base
        run = 0  # start of the pending untrapped run, relative to data
        for i in range(0, len(data), stride):
            if entry.guards and self._traps(entry, base + i, stride, Access.WRITE):
                if i > run:
                    self._store(entry, base + run, data[run:i])
                    self._charge(False, (i - run) // stride)
                self._trap(pid, gva + i, entry, base + i, Access.WRITE, data[i:i + stride], stride)
                run = i + stride
        if len(data) > run:
            self._store(entry, base + run, data[run:])
            self._charge(False, (len(data) - run) // stride)
        return count

    @staticmethod
    def _traps(entry: SlatEntry, off: int, n: int, kind) -> bool:
        mask = None
        for g in entry.guards:
            if kind not in g.kinds:
                continue
            if g.spp_bitmap is not None:
                if mask is None:
                    mask = spp_mask(off, n)
                if not g.spp_bitmap & mask:
                    continue
            return True
        return False

    def _load(self, entry: SlatEntry, off: int, n: int) -> bytes:
        raw = bytes(entry.store[off:off + n])
        enc = self.encryption
        if enc is not None and enc.gfns:
            raw = enc.transform(entry.base + off, raw)
        return raw

    def _store(self, entry: SlatEntry, off: int, data: bytes) -> None:
        enc = self.encryption
        if enc is not None and enc.gfns:
            data = enc.transform(entry.base + off, data)
        if entry.page_table:
            self.walk_cache.clear()
        entry.store[off:off + len(data)] = data

    def _access_piece(self, pid, gva, entry, off, kind, data, n):
        if not (entry.guards and self._traps(entry, off, n, kind)):
            if kind is Access.READ:
                piece = self._load(entry, off, n)
            else:
                piece = None
                if kind is Access.WRITE:
                    self._store(entry, off, data)
            return piece, self._charge(False), False, None
        return self._trap(pid, gva, entry, off, kind, data, n)

    def _trap(self, pid, gva, entry, off, kind, data, n):
        # Suspend the guard, emulate the access, then re-arm; all within one tick.
        self._in_trap = True
        try:
            old = self._load(entry, off, n)
            piece = None
            new = None
            if kind is Access.READ:
                piece = old
            elif kind is Access.WRITE:
                self._store(entry, off, data)
                new = bytes(data)
            ns = self._charge(True)
            relevant_guards = [g for g in entry.guards if kind in g.kinds and g.intersects(off, n)]
            event = MemoryEvent(
                gpa=entry.base + off, gva=gva, pid=pid, kind=kind, length=n,
                old_value=old if kind is Access.WRITE else None,
                new_value=new,
                relevant=bool(relevant_guards),
                timestamp=self.now,
                cost_us=ns / 1000,
            )
            self.n_events += 1
            self.events_by_frame[entry.gfn] += 1
            if event.relevant:
                self.n_relevant += 1
            if self.event_log is not None:
                self.event_log.append(event)
            if self.deliver_irrelevant:
                targets = [g for g in entry.guards if kind in g.kinds]
            else:
                targets = relevant_guards
            for g in targets:
                if g.callback is not None:
                    g.callback(event)
        finally:
            self._in_trap = False
        return piece, ns, True, event
