"""Simulated guest memory: frame allocator, 4-level page tables, the walk.

Page tables live in guest frames as 8-byte entries with an x86-64-like bit
layout, so the host can walk them from the outside exactly like the guest
MMU does.  Completed walks are memoised per 4 KiB page; any store into a
page-table frame drops the whole cache, so results never go stale.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional

from .errors import (
    AlreadyMapped,
    ExecuteProtected,
    InvalidAddress,
    Misaligned,
    NonCanonicalAddress,
    NoSuchProcess,
    OutOfGuestMemory,
    PageNotPresent,
    WriteProtected,
)
from .slat_events import (
    FRAME_SHIFT,
    FRAME_SIZE,
    Access,
    CostModel,
    MemoryEncryption,
    PageSize,
    SlatTable,
)

DEFAULT_RAM_BYTES = 256 << 20

PTE_PRESENT = 1 << 0
PTE_WRITABLE = 1 << 1
PTE_LEAF = 1 << 7
PTE_NX = 1 << 63
PTE_ADDR_MASK = 0x000F_FFFF_FFFF_F000

_U64 = struct.Struct("<Q")
_LEAF_LEVEL = {PageSize.SIZE_4K: 1, PageSize.SIZE_2M: 2, PageSize.SIZE_1G: 3}


def is_canonical(gva: int) -> bool:
    if not 0 <= gva < 1 << 64:
        return False
    top = gva >> 47
    return top == 0 or top == (1 << 17) - 1


def walk_indexes(gva: int) -> tuple[int, int, int, int, int]:
    """(pml4, pdpt, pd, pt, offset) slices of a canonical address."""
    return ((gva >> 39) & 511, (gva >> 30) & 511, (gva >> 21) & 511, (gva >> 12) & 511, gva & 0xFFF)


@dataclass(frozen=True)
class ProcessContext:
    pid: int
    page_directory_base: int
    name: str


class TranslationResult(NamedTuple):
    gpa: int
    page_size: int
    writable: bool
    executable: bool


class GuestMemory:
    """One guest VM's physical memory, SLAT and process address spaces."""

    def __init__(self, ram_bytes: int = DEFAULT_RAM_BYTES, cost: Optional[CostModel] = None,
                 slat: Optional[SlatTable] = None):
        if ram_bytes <= 0 or ram_bytes % FRAME_SIZE:
            raise ValueError("guest RAM must be a positive multiple of 4 KiB")
        self.ram_bytes = ram_bytes
        self.slat = slat or SlatTable(cost)
        self._used = bytearray(ram_bytes >> FRAME_SHIFT)
        self.processes: dict[str, ProcessContext] = {}
        self._next_pid = 4
        self.vmi_session = None

    @property
    def cost(self) -> CostModel:
        return self.slat.cost

    @property
    def now(self) -> int:
        return self.slat.now

    @now.setter
    def now(self, value: int) -> None:
        self.slat.now = value

    # -- frames -----------------------------------------------------------

    def alloc_frame(self, size: int = PageSize.SIZE_4K) -> int:
        size = PageSize(size)
        n = size >> FRAME_SHIFT
        used = self._used
        if n == 1:
            idx = used.find(0)
            if idx < 0:
                raise OutOfGuestMemory("no free 4 KiB frame")
        else:
            zero = bytes(n)
            for idx in range(0, len(used) - n + 1, n):
                if used[idx:idx + n] == zero:
                    break
            else:
                raise OutOfGuestMemory(f"no free aligned {size.name[5:]} frame")
        used[idx:idx + n] = b"\x01" * n
        gpa = idx << FRAME_SHIFT
        slat = self.slat
        if n == 1 and slat.is_mapped(idx):
            # previously mapped frame (e.g. remapped by a test): zero it
            slat.host_write(gpa, bytes(FRAME_SIZE))
        else:
            for g in range(idx, idx + n):
                if slat.is_mapped(g):
                    slat.slat_unmap(g)
            slat.slat_map(idx, idx, size=size)
        return gpa

    def _alloc_table(self) -> int:
        gpa = self.alloc_frame()
        self.slat.entry(gpa >> FRAME_SHIFT).page_table = True
        return gpa

    def frames_in_use(self) -> int:
        return self._used.count(1)

    # -- processes --------------------------------------------------------

    def create_process(self, name: str) -> ProcessContext:
        if name in self.processes:
            raise ValueError(f"process {name!r} already exists")
        proc = ProcessContext(self._next_pid, self._alloc_table(), name)
        self._next_pid += 4
        self.processes[name] = proc
        return proc

    def process(self, name: str) -> ProcessContext:
        try:
            return self.processes[name]
        except KeyError:
            raise NoSuchProcess(name) from None

    # -- page tables ------------------------------------------------------

    def _read_pte(self, addr: int) -> int:
        entry = self.slat._entries.get(addr >> FRAME_SHIFT)
        if entry is None:
            raise InvalidAddress(f"page table frame {addr:#x} not backed")
        return _U64.unpack_from(entry.store, addr - entry.base)[0]

    def _write_pte(self, addr: int, value: int) -> None:
        entry = self.slat._entries[addr >> FRAME_SHIFT]
        self.slat.walk_cache.clear()
        _U64.pack_into(entry.store, addr - entry.base, value)

    def map_page(self, process: ProcessContext, gva: int, gpa: int, size: int = PageSize.SIZE_4K,
                 writable: bool = True, executable: bool = False) -> None:
        size = PageSize(size)
        if not is_canonical(gva):
            raise NonCanonicalAddress(f"{gva:#x}")
        if gva % size or gpa % size:
            raise Misaligned(f"gva {gva:#x} / gpa {gpa:#x} not aligned to {size.name[5:]}")
        if gpa < 0 or gpa + size > self.ram_bytes:
            raise InvalidAddress(f"gpa {gpa:#x} outside guest RAM")
        leaf_level = _LEAF_LEVEL[size]
        table = process.page_directory_base
        for level in range(4, leaf_level, -1):
            slot = table + ((gva >> (12 + 9 * (level - 1))) & 511) * 8
            pte = self._read_pte(slot)
            if pte & PTE_PRESENT:
                if pte & PTE_LEAF:
                    raise AlreadyMapped(f"{gva:#x} covered by a level-{level} leaf")
                table = pte & PTE_ADDR_MASK
            else:
                child = self._alloc_table()
                self._write_pte(slot, child | PTE_PRESENT | PTE_WRITABLE)
                table = child
        slot = table + ((gva >> (12 + 9 * (leaf_level - 1))) & 511) * 8
        if self._read_pte(slot) & PTE_PRESENT:
            raise AlreadyMapped(f"{gva:#x} already mapped")
        pte = gpa | PTE_PRESENT
        if writable:
            pte |= PTE_WRITABLE
        if leaf_level > 1:
            pte |= PTE_LEAF
        if not executable:
            pte |= PTE_NX
        self._write_pte(slot, pte)

    def unmap_page(self, process: ProcessContext, gva: int) -> None:
        table = process.page_directory_base
        for level in (4, 3, 2, 1):
            slot = table + ((gva >> (12 + 9 * (level - 1))) & 511) * 8
            pte = self._read_pte(slot)
            if not pte & PTE_PRESENT:
                raise PageNotPresent(level, gva)
            if level == 1 or pte & PTE_LEAF:
                self._write_pte(slot, 0)
                return
            table = pte & PTE_ADDR_MASK

    def translate(self, process: ProcessContext, gva: int) -> TranslationResult:
        cache = self.slat.walk_cache
        key = (process.page_directory_base, gva >> 12)
        hit = cache.get(key)
        if hit is not None:
            return TranslationResult(hit[0] | (gva & 0xFFF), hit[1], hit[2], hit[3])
        if not is_canonical(gva):
            raise NonCanonicalAddress(f"{gva:#x}")
        entries = self.slat._entries
        table = process.page_directory_base
        for level in (4, 3, 2, 1):
            shift = 12 + 9 * (level - 1)
            addr = table + ((gva >> shift) & 511) * 8
            entry = entries[addr >> FRAME_SHIFT]
            pte = _U64.unpack_from(entry.store, addr - entry.base)[0]
            if not pte & PTE_PRESENT:
                raise PageNotPresent(level, gva)
            if level == 1 or pte & PTE_LEAF:
                size = 1 << shift
                base = pte & PTE_ADDR_MASK & ~(size - 1)
                result = TranslationResult(base | (gva & (size - 1)), size,
                                           bool(pte & PTE_WRITABLE), not pte & PTE_NX)
                cache[key] = (result.gpa & ~0xFFF, size, result.writable, result.executable)
                return result
            table = pte & PTE_ADDR_MASK

    def _spans(self, process: ProcessContext, gva: int, length: int):
        spans = []
        pos = 0
        while pos < length:
            tr = self.translate(process, gva + pos)
            n = min(length - pos, tr.page_size - ((gva + pos) & (tr.page_size - 1)))
            spans.append((gva + pos, tr, n))
            pos += n
        return spans

    # -- guest-originated accesses ----------------------------------------

    def guest_read(self, process: ProcessContext, gva: int, length: int) -> bytes:
        if length == 0:
            return b""
        if (gva & 0xFFF) + length <= FRAME_SIZE:
            return self.slat.access(process.pid, gva, self.translate(process, gva).gpa, Access.READ,
                                    length=length).data
        access = self.slat.access
        pid = process.pid
        return b"".join(access(pid, va, tr.gpa, Access.READ, length=n).data
                        for va, tr, n in self._spans(process, gva, length))

    def guest_write(self, process: ProcessContext, gva: int, data: bytes) -> None:
        if (gva & 0xFFF) + len(data) <= FRAME_SIZE:
            tr = self.translate(process, gva)
            if not tr.writable:
                raise WriteProtected(f"gva {gva:#x} is read-only")
            self.slat.access(process.pid, gva, tr.gpa, Access.WRITE, data=data)
            return
        spans = self._spans(process, gva, len(data))
        for va, tr, _ in spans:
            if not tr.writable:
                raise WriteProtected(f"gva {va:#x} is read-only")
        access = self.slat.access
        pid = process.pid
        pos = 0
        for va, tr, n in spans:
            access(pid, va, tr.gpa, Access.WRITE, data=data[pos:pos + n])
            pos += n

    def guest_execute(self, process: ProcessContext, gva: int) -> None:
        """Simulate fetching one instruction at ``gva``."""
        tr = self.translate(process, gva)
        if not tr.executable:
            raise ExecuteProtected(f"gva {gva:#x} is not executable")
        self.slat.access(process.pid, gva, tr.gpa, Access.EXECUTE, length=1)

    # -- encryption -------------------------------------------------------

    def encrypt_range(self, gpa: int, size: int, key: int) -> None:
        """Store frames in [gpa, gpa+size) under the guest's keystream."""
        slat = self.slat
        if slat.encryption is None:
            slat.encryption = MemoryEncryption(key)
        elif slat.encryption.key != key:
            raise ValueError("guest already encrypted under a different key")
        plain = slat.host_read(gpa, size)
        slat.encryption.gfns.update(range(gpa >> FRAME_SHIFT, (gpa + size) >> FRAME_SHIFT))
        slat.host_write(gpa, slat.encryption.transform(gpa, plain))
