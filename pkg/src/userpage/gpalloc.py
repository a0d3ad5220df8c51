"""Byte-granularity allocator layered over a page allocator.

Requests whose size plus header fits under the 256Kb threshold are carved
from 1Mb arena chunks using segregated power-of-two free lists (first fit
in address order, immediate coalescing).  Anything larger goes straight
to the page layer through its ``mmap``/``munmap``/``mremap`` seam, so a
large realloc over :class:`~userpage.umpa.UserPageAllocator` never copies.

Each arena allocation carries a 16-byte header in simulated memory:
magic, origin and region size.  Freed regions get a different magic so a
second free is caught.
"""

from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass
from typing import Optional, Protocol

from .costmodel import SMALL_PAGE
from .errors import (
    CannotGrowInPlace,
    DoubleFree,
    InvalidSize,
    NotMapped,
    UnknownAddress,
)
from .mmu import AddressSpace

HEADER = 16
MIN_SPLIT = 32
DEFAULT_CHUNK = 1 << 20
DEFAULT_THRESHOLD = 256 << 10
MIN_CLASS = 4  # 16 bytes
MAX_CLASS = 17  # 128Kb and up

MAGIC_LIVE = 0x4C495645
MAGIC_FREE = 0x46524545
ORIGIN_ARENA = 1
_HEADER_FMT = struct.Struct("<IIQ")


class PageBackend(Protocol):
    space: AddressSpace

    def mmap(self, size: int) -> int: ...

    def munmap(self, base: int, size: int) -> None: ...

    def mremap(self, base: int, old_size: int, new_size: int, no_relocate: bool = False) -> int: ...


def size_class(nbytes: int) -> int:
    return min(max(nbytes.bit_length() - 1, MIN_CLASS), MAX_CLASS)


def round_up(n: int, unit: int) -> int:
    return -(-n // unit) * unit


class FreeLists:
    """Free regions indexed by start, by end, and by size class.

    Each region remembers its chunk so neighbours from different chunks
    are never merged.
    """

    def __init__(self):
        self.size: dict[int, int] = {}
        self.by_end: dict[int, int] = {}
        self.chunk: dict[int, int] = {}
        self.classes: list[list[int]] = [[] for _ in range(MAX_CLASS + 1)]

    def copy(self) -> "FreeLists":
        other = FreeLists()
        other.size = dict(self.size)
        other.by_end = dict(self.by_end)
        other.chunk = dict(self.chunk)
        other.classes = [list(c) for c in self.classes]
        return other

    def total(self) -> int:
        return sum(self.size.values())

    def insert(self, start: int, size: int, chunk: int) -> None:
        self.size[start] = size
        self.by_end[start + size] = start
        self.chunk[start] = chunk
        bisect.insort(self.classes[size_class(size)], start)

    def remove(self, start: int) -> tuple[int, int]:
        size = self.size.pop(start)
        del self.by_end[start + size]
        chunk = self.chunk.pop(start)
        lst = self.classes[size_class(size)]
        del lst[bisect.bisect_left(lst, start)]
        return size, chunk

    def insert_coalesced(self, start: int, size: int, chunk: int) -> int:
        """Insert and merge with free neighbours in the same chunk; returns the merged start."""
        prev = self.by_end.get(start)
        if prev is not None and self.chunk[prev] == chunk:
            psize, _ = self.remove(prev)
            start, size = prev, size + psize
        nxt = start + size
        if nxt in self.size and self.chunk[nxt] == chunk:
            nsize, _ = self.remove(nxt)
            size += nsize
        self.insert(start, size, chunk)
        return start

    def find(self, need: int, alignment: int = HEADER) -> Optional[int]:
        """Lowest-address region in the smallest fitting class that can hold ``need``."""
        first = size_class(need)
        for c in range(first, MAX_CLASS + 1):
            lst = self.classes[c]
            if not lst:
                continue
            if c > first and c < MAX_CLASS and alignment == HEADER:
                return lst[0]
            for start in lst:
                if self.size[start] >= need + self._pad(start, alignment):
                    return start
        return None

    @staticmethod
    def _pad(start: int, alignment: int) -> int:
        return (-(start + HEADER)) % alignment

    def carve(self, start: int, need: int, alignment: int) -> tuple[int, int, int]:
        """Split ``need`` bytes (plus alignment pad) off ``start``; returns (region, size, user)."""
        size, chunk = self.remove(start)
        pad = self._pad(start, alignment)
        if pad >= MIN_SPLIT:
            self.insert(start, pad, chunk)
            start, size, pad = start + pad, size - pad, 0
        used = pad + need
        if size - used >= MIN_SPLIT:
            self.insert(start + used, size - used, chunk)
            size = used
        return start, size, start + pad + HEADER

    def rebuild_coalesced(self) -> None:
        regions = sorted((s, self.size[s], self.chunk[s]) for s in self.size)
        self.__init__()
        merged: list[list[int]] = []
        for start, size, chunk in regions:
            if merged and merged[-1][0] + merged[-1][1] == start and merged[-1][2] == chunk:
                merged[-1][1] += size
            else:
                merged.append([start, size, chunk])
        for start, size, chunk in merged:
            self.insert(start, size, chunk)


@dataclass
class _Live:
    region: int
    region_size: int
    requested: int
    chunk: int


class GpAllocator:
    """Segregated-fit arena allocator with a direct-to-pages path for large blocks."""

    def __init__(
        self,
        pages: PageBackend,
        chunk_size: int = DEFAULT_CHUNK,
        threshold: int = DEFAULT_THRESHOLD,
    ):
        if chunk_size % SMALL_PAGE or chunk_size < threshold:
            raise ValueError("chunk size must be a page multiple no smaller than the threshold")
        self.pages = pages
        self.space = pages.space
        self.ledger = self.space.ledger
        self.chunk_size = chunk_size
        self.threshold = threshold
        self.free_lists = FreeLists()
        self.chunks: list[int] = []
        self.live: dict[int, _Live] = {}
        self.direct: dict[int, int] = {}
        self.umpa_calls = 0
        self.header_writes = 0
        self.coalesce_passes = 0

    # -- helpers -------------------------------------------------------------

    def is_arena_size(self, size: int) -> bool:
        return HEADER + round_up(size, HEADER) <= self.threshold

    def _new_chunk(self) -> int:
        base = self.pages.mmap(self.chunk_size)
        self.umpa_calls += 1
        bisect.insort(self.chunks, base)
        self.free_lists.insert(base, self.chunk_size, base)
        return base

    def _chunk_of(self, addr: int) -> Optional[int]:
        i = bisect.bisect_right(self.chunks, addr) - 1
        if i >= 0 and addr < self.chunks[i] + self.chunk_size:
            return self.chunks[i]
        return None

    def _write_header(self, user: int, magic: int, size: int) -> None:
        self.space.write_bytes(user - HEADER, _HEADER_FMT.pack(magic, ORIGIN_ARENA, size))
        self.header_writes += 1

    def _lookup(self, addr: int) -> _Live:
        rec = self.live.get(addr)
        if rec is not None:
            return rec
        if self._chunk_of(addr - HEADER) is not None:
            try:
                magic, _, _ = _HEADER_FMT.unpack(self.space.peek(addr - HEADER, HEADER))
            except NotMapped:
                magic = 0
            if magic == MAGIC_FREE:
                raise DoubleFree(f"{addr:#x} was already freed")
        raise UnknownAddress(f"{addr:#x} is not a live allocation")

    def _check_size(self, size: int) -> None:
        if size <= 0:
            raise InvalidSize(f"size must be positive, got {size}")

    # -- arena path ----------------------------------------------------------

    def _arena_alloc(self, size: int, alignment: int, zeroed: bool) -> int:
        need = HEADER + round_up(size, HEADER)
        start = self.free_lists.find(need, alignment)
        if start is None:
            self._new_chunk()
            start = self.free_lists.find(need, alignment)
        chunk = self.free_lists.chunk[start]
        region, region_size, user = self.free_lists.carve(start, need, alignment)
        self.live[user] = _Live(region, region_size, size, chunk)
        self._write_header(user, MAGIC_LIVE, region_size)
        if zeroed:
            self.space.fill_zero(user, size)
        return user

    def _arena_release(self, user: int, rec: _Live, coalesce: bool = True) -> None:
        self._write_header(user, MAGIC_FREE, rec.region_size)
        del self.live[user]
        if coalesce:
            self.free_lists.insert_coalesced(rec.region, rec.region_size, rec.chunk)
            self.coalesce_passes += 1
        else:
            self.free_lists.insert(rec.region, rec.region_size, rec.chunk)

    # -- public API ----------------------------------------------------------

    def gp_malloc(self, size: int, alignment: int = HEADER, zeroed: bool = False) -> int:
        self._check_size(size)
        if alignment < HEADER or alignment & (alignment - 1):
            raise ValueError(f"alignment must be a power of two >= {HEADER}, got {alignment}")
        if self.is_arena_size(size) and HEADER + round_up(size, HEADER) + alignment <= self.chunk_size:
            return self._arena_alloc(size, alignment, zeroed)
        if alignment > SMALL_PAGE:
            raise ValueError(f"direct blocks are page aligned; {alignment} is not supported")
        base = self.pages.mmap(size)
        self.umpa_calls += 1
        self.direct[base] = size
        return base

    def gp_free(self, addr: int) -> None:
        if addr in self.direct:
            self.pages.munmap(addr, self.direct.pop(addr))
            self.umpa_calls += 1
            return
        self._arena_release(addr, self._lookup(addr))

    def gp_realloc(self, addr: int, new_size: int) -> int:
        self._check_size(new_size)
        if addr in self.direct:
            old = self.direct.pop(addr)
            new = self.pages.mremap(addr, old, new_size)
            self.umpa_calls += 1
            self.direct[new] = new_size
            return new
        rec = self._lookup(addr)
        new = self.gp_malloc(new_size)
        self.space.copy_bytes(new, addr, min(rec.requested, new_size))
        self._arena_release(addr, rec)
        return new

    def usable_size(self, addr: int) -> int:
        if addr in self.direct:
            return round_up(self.direct[addr], SMALL_PAGE)
        rec = self._lookup(addr)
        return rec.region + rec.region_size - addr

    def resize_in_place(self, addr: int, new_size: int) -> bool:
        """Resize without moving; returns False with no state change if impossible."""
        self._check_size(new_size)
        if addr in self.direct:
            old = self.direct[addr]
            try:
                self.pages.mremap(addr, old, new_size, no_relocate=True)
            except CannotGrowInPlace:
                return False
            self.umpa_calls += 1
            self.direct[addr] = new_size
            return True
        rec = self._lookup(addr)
        if not self.is_arena_size(new_size):
            return False
        end = rec.region + rec.region_size
        new_end = addr + round_up(new_size, HEADER)
        fl = self.free_lists
        if new_end > end:
            nxt = fl.size.get(end)
            if nxt is None or fl.chunk[end] != rec.chunk or end + nxt < new_end:
                return False
            fl.remove(end)
            if end + nxt - new_end >= MIN_SPLIT:
                fl.insert(new_end, end + nxt - new_end, rec.chunk)
                end = new_end
            else:
                end += nxt
        elif end - new_end >= MIN_SPLIT:
            fl.insert_coalesced(new_end, end - new_end, rec.chunk)
            end = new_end
        rec.region_size = end - rec.region
        rec.requested = new_size
        self._write_header(addr, MAGIC_LIVE, rec.region_size)
        return True

    # -- inspection ----------------------------------------------------------

    def free_bytes(self) -> int:
        return self.free_lists.total()

    def live_intervals(self) -> list[tuple[int, int]]:
        spans = [(a, r.requested) for a, r in self.live.items()]
        spans += list(self.direct.items())
        return sorted(spans)

    def audit(self) -> None:
        """Assert that live regions, free regions and chunks tile without overlap."""
        regions = [(r.region, r.region_size, r.chunk) for r in self.live.values()]
        regions += [(s, n, self.free_lists.chunk[s]) for s, n in self.free_lists.size.items()]
        regions.sort()
        per_chunk: dict[int, int] = {c: 0 for c in self.chunks}
        cursor = None
        for start, size, chunk in regions:
            assert chunk <= start and start + size <= chunk + self.chunk_size, "region escapes its chunk"
            assert cursor is None or start >= cursor, "regions overlap"
            cursor = start + size
            per_chunk[chunk] += size
        assert all(v == self.chunk_size for v in per_chunk.values()), "chunk bytes not conserved"
        spans = self.live_intervals()
        for (a, n), (b, _) in zip(spans, spans[1:]):
            assert a + n <= b, "live allocations overlap"
