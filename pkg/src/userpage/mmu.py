"""Per-process address spaces: page tables, a two-level TLB and byte access.

The process writes its own page table directly (``map_pages``,
``unmap_pages``, ``remap_pages``).  Every translation goes through a
16-entry L1 / 256-entry L2 LRU TLB; a miss costs a near refill when the
walked page sits in the same 512-entry page-table sheet as the previous
walk and a far refill otherwise.  Stale TLB entries survive an unmap until
``tlb_flush`` and make any later access a :class:`ConsistencyFault`.
"""

from __future__ import annotations

import bisect
import enum
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .costmodel import PAGES_PER_LARGE, SMALL_PAGE, CostLedger
from .errors import (
    AddressSpaceExhausted,
    AlignmentError,
    AlreadyMapped,
    ConsistencyFault,
    FrameAliased,
    NotMapped,
    NotOwner,
    RangeOverlap,
    ReservationError,
    SegmentationFault,
    UnmappedPage,
)
from .kernel import _HELD, FrameId, Kernel, ProcessId

PAGE_SHIFT = 12
SHEET_SHIFT = 9
DEFAULT_VA_PAGES = 1 << 24

PRESENT, WRITABLE, ACCESSED, DIRTY, LARGE = 1, 2, 4, 8, 16
_LARGE_KEY = 1 << 40


class AccessKind(enum.Enum):
    READ = "read"
    WRITE = "write"


class PhysicalLocation(NamedTuple):
    frame: FrameId
    offset: int


@dataclass(frozen=True)
class PageTableEntry:
    frame: FrameId
    present: bool
    writable: bool
    accessed: bool
    dirty: bool
    large: bool


def _tlb_key(vpn: int, large: bool) -> int:
    return _LARGE_KEY | (vpn & ~(PAGES_PER_LARGE - 1)) if large else vpn


class TlbModel:
    """Inclusive two-level LRU translation cache (L1 is a subset of L2)."""

    def __init__(self, l1_capacity: int = 16, l2_capacity: int = 256):
        self.l1_capacity = l1_capacity
        self.l2_capacity = l2_capacity
        self.l1: OrderedDict[int, int] = OrderedDict()
        self.l2: OrderedDict[int, int] = OrderedDict()
        self.last_sheet: Optional[int] = None
        self._key_arr: Optional[tuple[np.ndarray, np.ndarray]] = None

    def _keys(self) -> tuple[np.ndarray, np.ndarray]:
        """Cached (small vpn keys, large-page heads) currently in L2."""
        if self._key_arr is None:
            keys = np.fromiter(self.l2, dtype=np.int64, count=len(self.l2))
            large = keys >= _LARGE_KEY
            self._key_arr = (keys[~large], keys[large] - _LARGE_KEY) if large.any() else (keys, keys[:0])
        return self._key_arr

    def _overlapping(self, lo: int, hi: int) -> list[int]:
        small, heads = self._keys()
        hit = small[(small >= lo) & (small < hi)].tolist()
        if len(heads):
            over = heads[(heads < hi) & (heads + PAGES_PER_LARGE > lo)]
            hit += (over + _LARGE_KEY).tolist()
        return hit

    def lookup(self, key: int) -> Optional[int]:
        frame = self.l2.get(key)
        if frame is None:
            return None
        self.l2.move_to_end(key)
        if key in self.l1:
            self.l1.move_to_end(key)
        else:
            self.l1[key] = frame
            if len(self.l1) > self.l1_capacity:
                self.l1.popitem(last=False)
        return frame

    def insert(self, key: int, frame: int) -> None:
        self._key_arr = None
        self.l2[key] = frame
        self.l2.move_to_end(key)
        if len(self.l2) > self.l2_capacity:
            old, _ = self.l2.popitem(last=False)
            self.l1.pop(old, None)
        self.l1[key] = frame
        self.l1.move_to_end(key)
        if len(self.l1) > self.l1_capacity:
            self.l1.popitem(last=False)

    def insert_run(self, keys: list[int], frames: list[int]) -> None:
        """Insert a run of keys not currently cached, oldest first."""
        self._key_arr = None
        if len(keys) >= self.l2_capacity:
            keys, frames = keys[-self.l2_capacity:], frames[-self.l2_capacity:]
            self.l2 = OrderedDict(zip(keys, frames))
        else:
            self.l2.update(zip(keys, frames))
            while len(self.l2) > self.l2_capacity:
                self.l2.popitem(last=False)
        tail = min(len(keys), self.l1_capacity)
        if tail == self.l1_capacity:
            self.l1 = OrderedDict(zip(keys[-tail:], frames[-tail:]))
        else:
            self.l1 = OrderedDict((k, v) for k, v in self.l1.items() if k in self.l2)
            self.l1.update(zip(keys[-tail:], frames[-tail:]))
            while len(self.l1) > self.l1_capacity:
                self.l1.popitem(last=False)

    def refill(self, vpn: int) -> bool:
        """Record a page-table walk for ``vpn``; True when it was near."""
        sheet = vpn >> SHEET_SHIFT
        near = sheet == self.last_sheet
        self.last_sheet = sheet
        return near

    def caches_any(self, lo: int, hi: int) -> bool:
        if not self.l2:
            return False
        small, heads = self._keys()
        if ((small >= lo) & (small < hi)).any():
            return True
        return bool(len(heads)) and bool(((heads < hi) & (heads + PAGES_PER_LARGE > lo)).any())

    def flush(self, lo: Optional[int] = None, hi: Optional[int] = None) -> None:
        if lo is None:
            self.l1.clear()
            self.l2.clear()
        elif self.l2:
            for key in self._overlapping(lo, hi):
                del self.l2[key]
                self.l1.pop(key, None)
        self._key_arr = None
        self.last_sheet = None

    def scan_refills(self, lo: int, hi: int, uncached: bool = False) -> tuple[int, int]:
        """(near, far) refills a sequential scan of small pages [lo, hi) would cost now."""
        if hi <= lo:
            return 0, 0
        if uncached or not self.caches_any(lo, hi):
            first = lo >> SHEET_SHIFT
            far = (0 if first == self.last_sheet else 1) + ((hi - 1) >> SHEET_SHIFT) - first
            return (hi - lo) - far, far
        probe = TlbModel(self.l1_capacity, self.l2_capacity)
        probe.l1, probe.l2, probe.last_sheet = OrderedDict(self.l1), OrderedDict(self.l2), self.last_sheet
        near = far = 0
        for vpn in range(lo, hi):
            if probe.lookup(vpn) is None:
                if probe.refill(vpn):
                    near += 1
                else:
                    far += 1
                probe.insert(vpn, 0)
        return near, far


FaultHandler = Callable[[int, AccessKind], bool]


class AddressSpace:
    """One process's virtual address space, page table and TLB."""

    def __init__(self, kernel: Kernel, pid: ProcessId | None = None, va_pages: int = DEFAULT_VA_PAGES):
        self.kernel = kernel
        self.owner = kernel.create_process() if pid is None else pid
        self.ledger: CostLedger = kernel.ledgers[self.owner]
        kernel.spaces[self.owner] = self
        self.va_pages = va_pages
        # frame id + 1, so the lazily zeroed array reads as "no frame"
        self._frame = np.zeros(va_pages, dtype=np.int32)
        self._flags = np.zeros(va_pages, dtype=np.uint8)
        self.tlb = TlbModel()
        self.fault_handler: Optional[FaultHandler] = None
        self._watches: dict[int, Callable] = {}
        self._free_starts: list[int] = [1]
        self._free_len: dict[int, int] = {1: va_pages - 1}

    # -- inspection --------------------------------------------------------

    def entry(self, vpn: int) -> Optional[PageTableEntry]:
        flags = int(self._flags[vpn])
        if not flags & PRESENT:
            return None
        return PageTableEntry(
            int(self._frame[vpn]) - 1,
            True,
            bool(flags & WRITABLE),
            bool(flags & ACCESSED),
            bool(flags & DIRTY),
            bool(flags & LARGE),
        )

    def is_present(self, vpn: int, count: int = 1) -> bool:
        return bool((self._flags[vpn:vpn + count] & PRESENT).all())

    def any_present(self, vpn: int, count: int = 1) -> bool:
        return bool((self._flags[vpn:vpn + count] & PRESENT).any())

    def frames_at(self, vpn: int, count: int) -> np.ndarray:
        """Distinct frames mapped over [vpn, vpn+count), in address order."""
        flags = self._flags[vpn:vpn + count]
        fr = self._frame[vpn:vpn + count].astype(np.int64) - 1
        fr = fr[(flags & PRESENT).astype(bool)]
        if (flags & LARGE).any() and len(fr) > 1:
            fr = fr[np.concatenate(([True], fr[1:] != fr[:-1]))]
        return fr

    def mapped_frames(self) -> list[FrameId]:
        present = np.flatnonzero(self._flags & PRESENT)
        return sorted(set((self._frame[present].astype(np.int64) - 1).tolist()))

    # -- page-table writes -------------------------------------------------

    def _check_span(self, start: int, count: int) -> None:
        if count < 0 or start < 1 or start + count > self.va_pages:
            raise ReservationError(f"vpn range [{start}, {start + count}) outside the usable address space")

    def map_pages(self, start: int, frames: Sequence[FrameId], writable: bool = True) -> None:
        db = self.kernel.db
        arr = np.asarray(frames, dtype=np.int64)
        if not len(arr):
            return
        if ((arr < 0) | (arr >= db.capacity)).any():
            raise NotOwner("unknown frame id")
        large = db.large_head[arr]
        span = len(arr) + int(large.sum()) * (PAGES_PER_LARGE - 1)
        self._check_span(start, span)
        if ((db.state[arr] != _HELD) | (db.owner[arr] != self.owner)).any():
            raise NotOwner(f"frames not held by process {self.owner}")
        if db.mapped[arr].any() or db.has_duplicates(arr):
            raise FrameAliased("frame already mapped")
        if self.any_present(start, span):
            raise AlreadyMapped(f"vpns [{start}, {start + span}) already mapped")
        base_flags = PRESENT | (WRITABLE if writable else 0)
        if not large.any():
            self._frame[start:start + span] = arr + 1
            self._flags[start:start + span] = base_flags
        else:
            cursor = start
            plan = []
            for f, is_large in zip(arr.tolist(), large.tolist()):
                if is_large:
                    if cursor % PAGES_PER_LARGE:
                        raise AlignmentError(f"large frame must map at a 512-aligned vpn, got {cursor}")
                    plan.append((cursor, PAGES_PER_LARGE, f))
                    cursor += PAGES_PER_LARGE
                else:
                    plan.append((cursor, 1, f))
                    cursor += 1
            for vpn, n, f in plan:
                self._frame[vpn:vpn + n] = f + 1
                self._flags[vpn:vpn + n] = base_flags | (LARGE if n > 1 else 0)
        db.mapped[arr] = 1
        self.ledger.add_pte_writes(len(arr))

    def _entries_in(self, start: int, count: int) -> int:
        """Logical PTEs in a range; raises unless large mappings lie wholly inside."""
        flags = self._flags[start:start + count]
        nlarge_pages = int((flags & LARGE).astype(bool).sum())
        if not nlarge_pages:
            return count
        for vpn in (start, start + count - 1):
            if self._flags[vpn] & LARGE:
                head = vpn & ~(PAGES_PER_LARGE - 1)
                if head < start or head + PAGES_PER_LARGE > start + count:
                    raise AlignmentError("range splits a large mapping")
        return count - nlarge_pages + nlarge_pages // PAGES_PER_LARGE

    def unmap_pages(self, start: int, count: int) -> np.ndarray:
        self._check_span(start, count)
        if not self.is_present(start, count):
            raise NotMapped(f"vpns [{start}, {start + count}) not fully mapped")
        entries = self._entries_in(start, count)
        frames = self.frames_at(start, count)
        self._frame[start:start + count] = 0
        self._flags[start:start + count] = 0
        self.kernel.db.mapped[frames] = 0
        self.ledger.add_pte_writes(entries)
        return frames

    def remap_pages(self, src: int, dst: int, count: int) -> None:
        """Move entries src->dst without touching frame contents."""
        self._check_span(src, count)
        self._check_span(dst, count)
        if src < dst + count and dst < src + count:
            raise RangeOverlap("source and destination ranges overlap")
        if not self.is_present(src, count):
            raise NotMapped(f"source vpns [{src}, {src + count}) not fully mapped")
        if self.any_present(dst, count):
            raise AlreadyMapped(f"destination vpns [{dst}, {dst + count}) already mapped")
        entries = self._entries_in(src, count)
        if entries != count and (dst - src) % PAGES_PER_LARGE:
            raise AlignmentError("large mappings can only move by multiples of 512 pages")
        self._frame[dst:dst + count] = self._frame[src:src + count]
        self._flags[dst:dst + count] = self._flags[src:src + count]
        self._frame[src:src + count] = 0
        self._flags[src:src + count] = 0
        self.ledger.add_pte_writes(2 * entries)

    def swap_entries(self, a: int, b: int, count: int) -> None:
        """Exchange the entries of two equal-length mapped ranges pairwise."""
        self._check_span(a, count)
        self._check_span(b, count)
        if a < b + count and b < a + count:
            raise RangeOverlap("ranges overlap")
        if not (self.is_present(a, count) and self.is_present(b, count)):
            raise NotMapped("swap needs both ranges fully mapped")
        ea, eb = self._entries_in(a, count), self._entries_in(b, count)
        if (ea != count or eb != count) and (a - b) % PAGES_PER_LARGE:
            raise AlignmentError("large mappings can only move by multiples of 512 pages")
        fa, fl = self._frame[a:a + count].copy(), self._flags[a:a + count].copy()
        self._frame[a:a + count] = self._frame[b:b + count]
        self._flags[a:a + count] = self._flags[b:b + count]
        self._frame[b:b + count] = fa
        self._flags[b:b + count] = fl
        self.ledger.add_pte_writes(ea + eb)

    def tlb_flush(self, start: Optional[int] = None, count: Optional[int] = None) -> None:
        if start is None:
            self.tlb.flush()
        else:
            self.tlb.flush(start, start + (count or 1))
        self.ledger.add_flush()

    # -- translation -------------------------------------------------------

    def translate(self, vaddr: int, access: AccessKind = AccessKind.READ) -> PhysicalLocation:
        vpn = vaddr >> PAGE_SHIFT
        if not 1 <= vpn < self.va_pages:
            raise SegmentationFault(f"address {vaddr:#x} outside the address space")
        frame = self._walk(vpn, vaddr, access)
        flags = int(self._flags[vpn])
        if access is AccessKind.WRITE and not flags & WRITABLE:
            raise SegmentationFault(f"write to read-only page at {vaddr:#x}")
        self._flags[vpn] = flags | ACCESSED | (DIRTY if access is AccessKind.WRITE else 0)
        if flags & LARGE:
            head = vpn & ~(PAGES_PER_LARGE - 1)
            offset = ((vpn - head) << PAGE_SHIFT) | (vaddr & (SMALL_PAGE - 1))
        else:
            offset = vaddr & (SMALL_PAGE - 1)
        if self._watches:
            handler = self._watches.pop(vpn, None)
            if handler is not None:
                handler(vaddr, access)
        return PhysicalLocation(frame, offset)

    def _walk(self, vpn: int, vaddr: int, access: AccessKind) -> FrameId:
        flags = int(self._flags[vpn])
        key = _tlb_key(vpn, bool(flags & LARGE))
        cached = self.tlb.lookup(key)
        if cached is not None:
            if not flags & PRESENT or int(self._frame[vpn]) - 1 != cached:
                raise ConsistencyFault(f"stale TLB entry for vpn {vpn}; flush after unmapping")
            return cached
        if not flags & PRESENT:
            handler = self.fault_handler
            if handler is None:
                raise SegmentationFault(f"access to unmapped address {vaddr:#x}")
            surcharged = getattr(handler, "surcharged", None)
            self.ledger.add_faults(1, int(bool(surcharged and surcharged(vpn))))
            if not handler(vaddr, access) or not self._flags[vpn] & PRESENT:
                raise SegmentationFault(f"fault at {vaddr:#x} not resolved")
            flags = int(self._flags[vpn])
            key = _tlb_key(vpn, bool(flags & LARGE))
        if self.tlb.refill(vpn):
            self.ledger.add_refills(near=1)
        else:
            self.ledger.add_refills(far=1)
        frame = int(self._frame[vpn]) - 1
        self.tlb.insert(key, frame)
        return frame

    def _ppn(self, loc: PhysicalLocation) -> tuple[int, int]:
        return loc.frame + (loc.offset >> PAGE_SHIFT), loc.offset & (SMALL_PAGE - 1)

    def access_byte(self, vaddr: int, access: AccessKind = AccessKind.READ, value: Optional[int] = None) -> int:
        loc = self.translate(vaddr, access)
        ppn, off = self._ppn(loc)
        mem = self.kernel.memory
        self.ledger.add_byte_accesses(1)
        if access is AccessKind.WRITE:
            mem.write(ppn, off, bytes([value or 0]))
            return value or 0
        return mem.read(ppn, off, 1)[0]

    def _chunks(self, vaddr: int, n: int):
        end = vaddr + n
        while vaddr < end:
            step = min(end, (vaddr | (SMALL_PAGE - 1)) + 1) - vaddr
            yield vaddr, step
            vaddr += step

    def read_bytes(self, vaddr: int, n: int) -> bytes:
        mem = self.kernel.memory
        out = bytearray()
        for va, step in self._chunks(vaddr, n):
            ppn, off = self._ppn(self.translate(va, AccessKind.READ))
            out += mem.read(ppn, off, step)
        self.ledger.add_byte_accesses(n)
        return bytes(out)

    def write_bytes(self, vaddr: int, data: bytes) -> None:
        mem = self.kernel.memory
        pos = 0
        for va, step in self._chunks(vaddr, len(data)):
            ppn, off = self._ppn(self.translate(va, AccessKind.WRITE))
            mem.write(ppn, off, data[pos:pos + step])
            pos += step
        self.ledger.add_byte_accesses(len(data))

    def copy_bytes(self, dst: int, src: int, n: int) -> None:
        """memmove-style copy charged as bytes copied."""
        data = bytearray()
        mem = self.kernel.memory
        for va, step in self._chunks(src, n):
            ppn, off = self._ppn(self.translate(va, AccessKind.READ))
            data += mem.read(ppn, off, step)
        pos = 0
        for va, step in self._chunks(dst, n):
            ppn, off = self._ppn(self.translate(va, AccessKind.WRITE))
            mem.write(ppn, off, bytes(data[pos:pos + step]))
            pos += step
        self.ledger.add_copied(n)

    def fill_zero(self, vaddr: int, n: int) -> None:
        """memset(0) charged as bytes zeroed."""
        mem = self.kernel.memory
        for va, step in self._chunks(vaddr, n):
            ppn, off = self._ppn(self.translate(va, AccessKind.WRITE))
            if step == SMALL_PAGE:
                mem.zero(np.array([ppn]))
            else:
                mem.write(ppn, off, bytes(step))
        self.ledger.add_zeroed(n)

    def peek(self, vaddr: int, n: int) -> bytes:
        """Read through the page table without charging or touching the TLB."""
        mem = self.kernel.memory
        out = bytearray()
        for va, step in self._chunks(vaddr, n):
            vpn = va >> PAGE_SHIFT
            flags = int(self._flags[vpn])
            if not flags & PRESENT:
                raise NotMapped(f"vpn {vpn} not mapped")
            frame = int(self._frame[vpn]) - 1
            if flags & LARGE:
                frame += vpn & (PAGES_PER_LARGE - 1)
            out += mem.read(frame, va & (SMALL_PAGE - 1), step)
        return bytes(out)

    def touch_pages(self, vaddr: int, count: int, value: int = 1) -> None:
        """Write ``value`` at vaddr + k*4096 for k in range(count).

        Same results and charges as ``count`` calls to :meth:`access_byte`;
        runs in bulk when the range is small-paged, unwatched and uncached.
        """
        if count <= 0:
            return
        lo = vaddr >> PAGE_SHIFT
        hi = lo + count
        if not self._bulk_touch(vaddr, lo, hi, value):
            for k in range(count):
                self.access_byte(vaddr + k * SMALL_PAGE, AccessKind.WRITE, value)

    def _bulk_touch(self, vaddr: int, lo: int, hi: int, value: int) -> bool:
        if lo < 1 or hi > self.va_pages:
            return False
        if self._watches and any(lo <= v < hi for v in self._watches):
            return False
        flags = self._flags[lo:hi]
        if (flags & LARGE).any() or self.tlb.caches_any(lo, hi):
            return False
        present = (flags & PRESENT).astype(bool)
        if not present.all():
            pager = self.fault_handler
            if not isinstance(pager, LazyPager) or (~present & (flags != 0)).any():
                return False
            missing = lo + np.flatnonzero(~present)
            if not pager.can_fill(missing):
                return False
            surcharged = pager.fill(missing)
            self.ledger.add_faults(len(missing), surcharged)
            flags = self._flags[lo:hi]
        if not (flags & WRITABLE).all():
            return False
        near, far = self.tlb.scan_refills(lo, hi, uncached=True)
        self.ledger.add_refills(near, far)
        self.tlb.last_sheet = (hi - 1) >> SHEET_SHIFT
        frames = self._frame[lo:hi].astype(np.int64) - 1
        keep = min(hi - lo, self.tlb.l2_capacity)
        self.tlb.insert_run(list(range(hi - keep, hi)), frames[-keep:].tolist())
        self._flags[lo:hi] = flags | ACCESSED | DIRTY
        self.kernel.memory.write_stripe(frames, vaddr & (SMALL_PAGE - 1), value)
        self.ledger.add_byte_accesses(hi - lo)
        return True

    def traversal_cost(self, vaddr: int, count: int) -> float:
        """Modeled cycles for a one-byte-per-page pass over resident small pages, from the current TLB state."""
        lo = vaddr >> PAGE_SHIFT
        near, far = self.tlb.scan_refills(lo, lo + count)
        p = self.ledger.params
        return near * p.tlb_near_refill + far * p.tlb_far_refill + count * p.byte_access_cost

    # -- watches -----------------------------------------------------------

    def watch(self, vpns: Iterable[int], handler: Callable) -> None:
        vpns = list(vpns)
        for vpn in vpns:
            if not (0 <= vpn < self.va_pages and self._flags[vpn] & PRESENT):
                raise UnmappedPage(f"cannot watch unmapped vpn {vpn}")
        for vpn in vpns:
            self._watches[vpn] = handler

    # -- reservations ------------------------------------------------------

    def reserve(self, count_pages: int, align: int = 1) -> int:
        """First-fit, lowest-address reservation of ``count_pages`` pages."""
        if count_pages <= 0:
            raise ReservationError("reservation must cover at least one page")
        for start in self._free_starts:
            length = self._free_len[start]
            base = -(-start // align) * align
            if base + count_pages <= start + length:
                self._take(start, base, count_pages)
                return base
        raise AddressSpaceExhausted(f"no free run of {count_pages} pages")

    def reserve_at(self, vpn: int, count_pages: int) -> None:
        i = bisect.bisect_right(self._free_starts, vpn) - 1
        if i < 0 or count_pages <= 0:
            raise ReservationError(f"vpns [{vpn}, {vpn + count_pages}) not free")
        start = self._free_starts[i]
        if vpn + count_pages > start + self._free_len[start]:
            raise ReservationError(f"vpns [{vpn}, {vpn + count_pages}) not free")
        self._take(start, vpn, count_pages)

    def is_free(self, vpn: int, count_pages: int) -> bool:
        i = bisect.bisect_right(self._free_starts, vpn) - 1
        if i < 0:
            return False
        start = self._free_starts[i]
        return vpn + count_pages <= start + self._free_len[start]

    def _take(self, start: int, base: int, count: int) -> None:
        length = self._free_len.pop(start)
        i = bisect.bisect_left(self._free_starts, start)
        del self._free_starts[i]
        if base > start:
            self._add_free(start, base - start)
        end = start + length
        if base + count < end:
            self._add_free(base + count, end - base - count)

    def _add_free(self, start: int, length: int) -> None:
        bisect.insort(self._free_starts, start)
        self._free_len[start] = length

    def release_reservation(self, start: int, count: int) -> None:
        if count <= 0 or start < 1 or start + count > self.va_pages:
            raise ReservationError("bad reservation range")
        i = bisect.bisect_right(self._free_starts, start + count - 1) - 1
        if i >= 0:
            s = self._free_starts[i]
            if s + self._free_len[s] > start:
                raise ReservationError(f"vpns [{start}, {start + count}) not reserved")
        if self.any_present(start, count):
            raise ReservationError("cannot release a reservation with present pages")
        # coalesce with neighbours
        if i >= 0:
            s = self._free_starts[i]
            if s + self._free_len[s] == start:
                start, count = s, count + self._free_len.pop(s)
                del self._free_starts[i]
        nxt = start + count
        if nxt in self._free_len:
            count += self._free_len.pop(nxt)
            del self._free_starts[bisect.bisect_left(self._free_starts, nxt)]
        self._add_free(start, count)

    def free_ranges(self) -> list[tuple[int, int]]:
        return [(s, self._free_len[s]) for s in self._free_starts]


class LazyPager:
    """Fault-driven page supply: frames attach one fault at a time on first touch.

    This is the kernel paged-memory baseline.  Regions are registered as
    address ranges; a fault inside a region asks the kernel for one
    zero-filled frame and maps it.
    """

    def __init__(self, space: AddressSpace):
        self.space = space
        self._starts: list[int] = []
        self._len: dict[int, int] = {}
        space.fault_handler = self

    def add_region(self, start: int, count: int) -> None:
        bisect.insort(self._starts, start)
        self._len[start] = count

    def remove_region(self, start: int) -> None:
        del self._len[start]
        del self._starts[bisect.bisect_left(self._starts, start)]

    def region_of(self, vpn: int) -> Optional[tuple[int, int]]:
        i = bisect.bisect_right(self._starts, vpn) - 1
        if i >= 0:
            s = self._starts[i]
            if vpn < s + self._len[s]:
                return s, self._len[s]
        return None

    def surcharged(self, vpn: int) -> bool:
        threshold = self.space.ledger.params.fault_surcharge_above_pages
        region = self.region_of(vpn)
        return threshold is not None and region is not None and region[1] > threshold

    def __call__(self, vaddr: int, access: AccessKind) -> bool:
        vpn = vaddr >> PAGE_SHIFT
        if self.region_of(vpn) is None:
            return False
        frames = self.space.kernel.fault_in(self.space.owner, 1)
        self.space.map_pages(vpn, frames)
        return True

    def can_fill(self, vpns: np.ndarray) -> bool:
        region = self.region_of(int(vpns[0]))
        if region is None or int(vpns[-1]) >= region[0] + region[1]:
            return False
        return self.space.kernel.db.feasible(len(vpns), 0)

    def fill(self, vpns: np.ndarray) -> int:
        """Fault in every vpn (all in one region, ascending); returns surcharged count."""
        frames = self.space.kernel.fault_in(self.space.owner, len(vpns))
        if int(vpns[-1]) - int(vpns[0]) + 1 == len(vpns):
            self.space.map_pages(int(vpns[0]), frames)
            return len(vpns) if self.surcharged(int(vpns[0])) else 0
        runs = np.split(vpns, np.flatnonzero(np.diff(vpns) != 1) + 1)
        pos = 0
        for run in runs:
            self.space.map_pages(int(run[0]), frames[pos:pos + len(run)])
            pos += len(run)
        return len(vpns) if self.surcharged(int(vpns[0])) else 0
