"""User mode page allocator.

Physical frames are obtained from the kernel in batches with
``sys_exchange_pages`` and parked in a per-process lookaside cache when
blocks are freed, so a warm allocator never enters the kernel.  Blocks
are always mapped eagerly, which means no page faults ever happen on
them, and resizing or swapping blocks only rewrites page-table entries.

Frames freed by this process come back tagged dirty.  Handing a dirty
frame to a caller that did not ask for zeroed memory costs nothing, which
is the main saving over a kernel that must clear every page it gives out.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .costmodel import PAGES_PER_LARGE, SMALL_PAGE
from .errors import (
    AlignmentError,
    AlreadyCommitted,
    CannotGrowInPlace,
    InvalidSize,
    NotCommitted,
    NotReserved,
    OutOfPhysicalMemory,
    RangeOverlap,
    SizeMismatch,
    UnknownBlock,
)
from .kernel import FrameId, FrameStack, Kernel, Severity, SizeClass
from .mmu import PAGE_SHIFT, AddressSpace

DEFAULT_CACHE_CAP = 32768  # small-page equivalents (128Mb)


@dataclass(frozen=True)
class AllocFlags:
    zeroed: bool = False
    no_relocate: bool = False
    large_pages: bool = False


@dataclass
class Block:
    vpn: int
    pages: int
    committed: np.ndarray
    large: bool = False

    @property
    def base(self) -> int:
        return self.vpn << PAGE_SHIFT


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """(offset, length) of each run of True in ``mask``."""
    if mask.all():
        return [(0, len(mask))] if len(mask) else []
    idx = np.flatnonzero(mask)
    if not len(idx):
        return []
    breaks = np.flatnonzero(np.diff(idx) != 1) + 1
    return [(int(r[0]), len(r)) for r in np.split(idx, breaks)]


@dataclass
class LookasideCache:
    """Process-held free frames, tagged by whether they are known to be zero."""

    capacity_cap: int = DEFAULT_CACHE_CAP
    low_watermark: Optional[int] = None
    small_dirty: FrameStack = field(default_factory=FrameStack)
    small_zeroed: FrameStack = field(default_factory=FrameStack)
    large_dirty: FrameStack = field(default_factory=FrameStack)
    large_zeroed: FrameStack = field(default_factory=FrameStack)

    @property
    def high_watermark(self) -> int:
        return self.capacity_cap

    @property
    def size(self) -> int:
        return self.small_count() + PAGES_PER_LARGE * (len(self.large_dirty) + len(self.large_zeroed))

    def small_count(self) -> int:
        return len(self.small_dirty) + len(self.small_zeroed)

    def frames(self) -> np.ndarray:
        pools = (self.small_dirty, self.small_zeroed, self.large_dirty, self.large_zeroed)
        return np.concatenate([p.to_array() for p in pools])

    def take(self, n: int, large: bool, want_zeroed: bool) -> tuple[np.ndarray, np.ndarray]:
        """Up to ``n`` frames as (clean, dirty) arrays, preferred kind first."""
        dirty_pool, zero_pool = (self.large_dirty, self.large_zeroed) if large else (self.small_dirty, self.small_zeroed)
        first, second = (zero_pool, dirty_pool) if want_zeroed else (dirty_pool, zero_pool)
        a = first.take(n)
        b = second.take(n - len(a))
        return (a, b) if want_zeroed else (b, a)

    def put_back(self, clean, dirty, large: bool) -> None:
        if large:
            self.large_zeroed.extend(clean)
            self.large_dirty.extend(dirty)
        else:
            self.small_zeroed.extend(clean)
            self.small_dirty.extend(dirty)

    def pop_for_release(self, target: int) -> np.ndarray:
        """Remove at least ``target`` small-page equivalents, dirty frames first."""
        out: list[np.ndarray] = []
        got = 0
        for pool, weight in (
            (self.small_dirty, 1),
            (self.large_dirty, PAGES_PER_LARGE),
            (self.small_zeroed, 1),
            (self.large_zeroed, PAGES_PER_LARGE),
        ):
            if got >= target:
                break
            taken = pool.take(-(-(target - got) // weight))
            out.append(taken)
            got += len(taken) * weight
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


class UserPageAllocator:
    """The five-call page allocator plus swap and mmap-style wrappers."""

    def __init__(
        self,
        kernel: Kernel,
        space: AddressSpace | None = None,
        capacity_cap: int = DEFAULT_CACHE_CAP,
        low_watermark: Optional[int] = None,
        pressure_fraction: float = 0.25,
    ):
        self.kernel = kernel
        self.space = space or AddressSpace(kernel)
        self.pid = self.space.owner
        self.ledger = self.space.ledger
        self.cache = LookasideCache(capacity_cap, low_watermark)
        self.pressure_fraction = Fraction(str(pressure_fraction))
        self.blocks: dict[int, Block] = {}
        self._bases: list[int] = []
        kernel.register_pressure_handler(self.pid, self.pressure_release)

    # -- frame supply --------------------------------------------------------

    def preload(self, n_small: int) -> None:
        """Fill the cache with ``n_small`` frames in one kernel call."""
        if self.cache.size + n_small > self.cache.capacity_cap:
            raise ValueError(f"preload of {n_small} frames exceeds the cache cap {self.cache.capacity_cap}")
        frames = self.kernel.sys_exchange_pages(self.pid, [], [SizeClass.SMALL] * n_small)
        clean, dirty = self._split_by_cleanliness(frames)
        self.cache.put_back(clean, dirty, large=False)

    def _split_by_cleanliness(self, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        arr = np.asarray(frames, dtype=np.int64)
        db = self.kernel.db
        if not db.large_head[arr].any():
            dirty = db.dirty[arr]
        else:
            dirty = np.array([db.dirty[db.ppns(f)].any() for f in arr.tolist()], dtype=bool)
        return arr[~dirty], arr[dirty]

    def can_supply(self, n_small: int) -> bool:
        short = max(0, n_small - self.cache.small_count())
        return short == 0 or self.kernel.db.feasible(short, 0)

    def _acquire(self, n: int, zeroed: bool, large: bool = False) -> np.ndarray:
        if n == 0:
            return np.empty(0, dtype=np.int64)
        clean, dirty = self.cache.take(n, large, zeroed)
        short = n - len(clean) - len(dirty)
        if short:
            kind = SizeClass.LARGE if large else SizeClass.SMALL
            try:
                fresh = self.kernel.sys_exchange_pages(self.pid, [], [kind] * short)
            except OutOfPhysicalMemory:
                self.cache.put_back(clean, dirty, large)
                raise
            c, d = self._split_by_cleanliness(fresh)
            clean = np.concatenate([clean, c])
            dirty = np.concatenate([dirty, d])
        if zeroed and len(dirty):
            self._clear(dirty)
        return np.concatenate([clean, dirty] if zeroed else [dirty, clean])

    def _clear(self, frames: np.ndarray) -> None:
        db = self.kernel.db
        if db.large_head[frames].any():
            ppns = np.concatenate([db.ppns(f) for f in frames.tolist()])
        else:
            ppns = frames
        db.memory.zero(ppns)
        self.ledger.add_zeroed(len(ppns) * SMALL_PAGE)

    def _stash(self, frames: np.ndarray) -> None:
        if not len(frames):
            return
        arr = np.asarray(frames, dtype=np.int64)
        large = self.kernel.db.large_head[arr]
        if large.any():
            self.cache.large_dirty.extend(arr[large])
            self.cache.small_dirty.extend(arr[~large])
        else:
            self.cache.small_dirty.extend(arr)
        self._trim()

    def _trim(self) -> None:
        cache = self.cache
        if cache.size <= cache.capacity_cap:
            return
        low = cache.capacity_cap if cache.low_watermark is None else cache.low_watermark
        frames = cache.pop_for_release(cache.size - low)
        self.kernel.sys_exchange_pages(self.pid, frames, [])

    def exchange_for_large(self, count: int) -> None:
        """Trade 512*count cached small frames for ``count`` large frames in one kernel call."""
        need = count * PAGES_PER_LARGE
        if self.cache.small_count() < need:
            raise ValueError(f"need {need} cached small frames, have {self.cache.small_count()}")
        clean, dirty = self.cache.take(need, large=False, want_zeroed=False)
        try:
            larges = self.kernel.sys_exchange_pages(self.pid, np.concatenate([dirty, clean]), [SizeClass.LARGE] * count)
        except OutOfPhysicalMemory:
            self.cache.put_back(clean, dirty, large=False)
            raise
        c, d = self._split_by_cleanliness(larges)
        self.cache.put_back(c, d, large=True)

    # -- block bookkeeping ---------------------------------------------------

    def _pages_for(self, size: int, large: bool) -> int:
        if size <= 0:
            raise InvalidSize(f"size must be positive, got {size}")
        pages = -(-size // SMALL_PAGE)
        if large:
            pages = -(-pages // PAGES_PER_LARGE) * PAGES_PER_LARGE
        return pages

    def _block(self, base: int, size: Optional[int] = None) -> Block:
        block = self.blocks.get(base)
        if block is None:
            raise UnknownBlock(f"no block at {base:#x}")
        if size is not None and (size <= 0 or self._pages_for(size, block.large) != block.pages):
            raise UnknownBlock(f"size {size} does not match the block at {base:#x}")
        return block

    def _add_block(self, block: Block) -> None:
        self.blocks[block.base] = block
        bisect.insort(self._bases, block.base)

    def _drop_block(self, block: Block) -> None:
        del self.blocks[block.base]
        del self._bases[bisect.bisect_left(self._bases, block.base)]

    def _containing(self, base: int, size: int) -> tuple[Block, int, int]:
        if size <= 0:
            raise InvalidSize(f"size must be positive, got {size}")
        if base % SMALL_PAGE:
            raise NotReserved(f"{base:#x} is not page aligned")
        i = bisect.bisect_right(self._bases, base) - 1
        if i >= 0:
            block = self.blocks[self._bases[i]]
            first = (base >> PAGE_SHIFT) - block.vpn
            count = -(-size // SMALL_PAGE)
            if first + count <= block.pages:
                if block.large:
                    raise AlignmentError("commit/release work on small-page blocks only")
                return block, first, count
        raise NotReserved(f"[{base:#x}, {base + size:#x}) is not inside a reserved region")

    def _unmap_committed(self, block: Block, first: int, count: int) -> np.ndarray:
        parts = [self.space.unmap_pages(block.vpn + first + off, n)
                 for off, n in _runs(block.committed[first:first + count])]
        frames = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
        block.committed[first:first + count] = False
        self.space.tlb_flush(block.vpn + first, count)
        return frames

    # -- public API ----------------------------------------------------------

    def userpage_malloc(self, size: int, flags: AllocFlags = AllocFlags()) -> int:
        pages = self._pages_for(size, flags.large_pages)
        vpn = self.space.reserve(pages, PAGES_PER_LARGE if flags.large_pages else 1)
        try:
            if flags.large_pages:
                frames = self._acquire(pages // PAGES_PER_LARGE, flags.zeroed, large=True)
            else:
                frames = self._acquire(pages, flags.zeroed)
        except OutOfPhysicalMemory:
            self.space.release_reservation(vpn, pages)
            raise
        self.space.map_pages(vpn, frames)
        self._add_block(Block(vpn, pages, np.ones(pages, dtype=bool), flags.large_pages))
        return vpn << PAGE_SHIFT

    def userpage_reserve(self, size: int) -> int:
        """Claim address space with nothing committed."""
        pages = self._pages_for(size, False)
        vpn = self.space.reserve(pages)
        self._add_block(Block(vpn, pages, np.zeros(pages, dtype=bool)))
        return vpn << PAGE_SHIFT

    def userpage_free(self, base: int, size: int) -> None:
        block = self._block(base, size)
        frames = self._unmap_committed(block, 0, block.pages)
        self.space.release_reservation(block.vpn, block.pages)
        self._drop_block(block)
        self._stash(frames)

    def userpage_realloc(self, base: int, old_size: int, new_size: int, flags: AllocFlags = AllocFlags()) -> int:
        block = self._block(base, old_size)
        new_pages = self._pages_for(new_size, block.large)
        old_pages = block.pages
        unit = PAGES_PER_LARGE if block.large else 1
        if new_pages == old_pages:
            return base
        if new_pages < old_pages:
            frames = self._unmap_committed(block, new_pages, old_pages - new_pages)
            self.space.release_reservation(block.vpn + new_pages, old_pages - new_pages)
            block.pages = new_pages
            block.committed = block.committed[:new_pages].copy()
            self._stash(frames)
            return base

        extra = new_pages - old_pages
        in_place = self.space.is_free(block.vpn + old_pages, extra)
        if not in_place and flags.no_relocate:
            raise CannotGrowInPlace(f"pages after {base:#x} are in use")
        if in_place:
            self.space.reserve_at(block.vpn + old_pages, extra)
            new_vpn = block.vpn
        else:
            new_vpn = self.space.reserve(new_pages, unit)
        try:
            frames = self._acquire(extra // unit, flags.zeroed, large=block.large)
        except OutOfPhysicalMemory:
            self.space.release_reservation(new_vpn if not in_place else block.vpn + old_pages,
                                           new_pages if not in_place else extra)
            raise
        if not in_place:
            for off, n in _runs(block.committed):
                self.space.remap_pages(block.vpn + off, new_vpn + off, n)
            self.space.tlb_flush(block.vpn, old_pages)
            self.space.release_reservation(block.vpn, old_pages)
            self._drop_block(block)
            block.vpn = new_vpn
            self._add_block(block)
        self.space.map_pages(new_vpn + old_pages, frames)
        block.pages = new_pages
        block.committed = np.concatenate([block.committed, np.ones(extra, dtype=bool)])
        return new_vpn << PAGE_SHIFT

    def userpage_commit(self, base: int, size: int, flags: AllocFlags = AllocFlags()) -> None:
        block, first, count = self._containing(base, size)
        if block.committed[first:first + count].any():
            raise AlreadyCommitted(f"part of [{base:#x}, {base + size:#x}) is already committed")
        frames = self._acquire(count, flags.zeroed)
        self.space.map_pages(block.vpn + first, frames)
        block.committed[first:first + count] = True

    def userpage_release(self, base: int, size: int) -> None:
        block, first, count = self._containing(base, size)
        if not block.committed[first:first + count].all():
            raise NotCommitted(f"part of [{base:#x}, {base + size:#x}) is not committed")
        self._stash(self._unmap_committed(block, first, count))

    def userpage_swap(self, base_a: int, base_b: int, size: int) -> None:
        """Exchange two blocks' contents by swapping their page-table entries."""
        a = self._block(base_a)
        b = self._block(base_b)
        if a is b:
            raise RangeOverlap("cannot swap a block with itself")
        pages = -(-size // SMALL_PAGE) if size > 0 else 0
        if not pages or a.pages != pages or b.pages != pages:
            raise SizeMismatch(f"blocks of {a.pages} and {b.pages} pages cannot swap {size} bytes")
        if not (a.committed.all() and b.committed.all()):
            raise NotCommitted("swap needs fully committed blocks")
        self.space.swap_entries(a.vpn, b.vpn, pages)
        self.space.tlb_flush(a.vpn, pages)
        self.space.tlb_flush(b.vpn, pages)

    def pressure_release(self, severity: Severity) -> np.ndarray:
        """Kernel upcall: give back a severity-scaled share of the cache."""
        level = severity.level if isinstance(severity, Severity) else int(severity)
        target = math.ceil(self.pressure_fraction * level * self.cache.size)
        return self.cache.pop_for_release(min(target, self.cache.size))

    # -- mmap-style seam -----------------------------------------------------

    def mmap_anonymous(self, size: int) -> int:
        return self.userpage_malloc(size, AllocFlags(zeroed=True))

    mmap = mmap_anonymous

    def munmap(self, base: int, size: int) -> None:
        self.userpage_free(base, size)

    def mremap(self, base: int, old_size: int, new_size: int, no_relocate: bool = False) -> int:
        return self.userpage_realloc(base, old_size, new_size, AllocFlags(zeroed=True, no_relocate=no_relocate))
