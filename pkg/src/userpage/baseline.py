"""Kernel page allocators used as baselines.

:class:`KernelPagedAllocator` reserves address space and lets frames
arrive one page fault at a time (``VirtualAlloc``/``mmap`` without
populate).  :class:`KernelNonPagedAllocator` asks the kernel for all
frames up front and gets them cleared, the way ``MAP_POPULATE`` does.
Both expose the ``mmap``/``munmap``/``mremap`` seam that the general
purpose allocator sits on; neither can resize without copying once the
pages after a block are taken.
"""

from __future__ import annotations

import numpy as np

from .costmodel import SMALL_PAGE
from .errors import CannotGrowInPlace, InvalidSize, UnknownBlock
from .kernel import Kernel, SizeClass
from .mmu import PAGE_SHIFT, PRESENT, AddressSpace, LazyPager


def _pages(size: int) -> int:
    if size <= 0:
        raise InvalidSize(f"size must be positive, got {size}")
    return -(-size // SMALL_PAGE)


class _KernelAllocator:
    def __init__(self, kernel: Kernel, space: AddressSpace | None = None):
        self.kernel = kernel
        self.space = space or AddressSpace(kernel)
        self.pid = self.space.owner
        self.ledger = self.space.ledger
        self.blocks: dict[int, int] = {}

    def _block(self, base: int, size: int) -> int:
        pages = self.blocks.get(base)
        if pages is None or _pages(size) != pages:
            raise UnknownBlock(f"no block of {size} bytes at {base:#x}")
        return pages

    def _present_frames(self, vpn: int, pages: int) -> np.ndarray:
        """Unmap whatever is resident in the range and return its frames."""
        present = (self.space._flags[vpn:vpn + pages] & PRESENT).astype(bool)
        idx = np.flatnonzero(present)
        if not len(idx):
            return idx
        if len(idx) == pages:
            return self.space.unmap_pages(vpn, pages)
        runs = np.split(idx, np.flatnonzero(np.diff(idx) != 1) + 1)
        return np.concatenate([self.space.unmap_pages(vpn + int(r[0]), len(r)) for r in runs])

    def mremap(self, base: int, old_size: int, new_size: int, no_relocate: bool = False) -> int:
        pages = self._block(base, old_size)
        new_pages = _pages(new_size)
        vpn = base >> PAGE_SHIFT
        if new_pages <= pages:
            if new_pages < pages:
                self._shrink(vpn, pages, new_pages)
            return base
        if self.space.is_free(vpn + pages, new_pages - pages):
            self._grow_in_place(vpn, pages, new_pages)
            return base
        if no_relocate:
            raise CannotGrowInPlace(f"pages after {base:#x} are in use")
        new_base = self.mmap(new_size)
        self.space.copy_bytes(new_base, base, min(old_size, new_size))
        self.munmap(base, old_size)
        return new_base


class KernelPagedAllocator(_KernelAllocator):
    """Lazy allocation: reserve now, fault each page in on first touch."""

    def __init__(self, kernel: Kernel, space: AddressSpace | None = None):
        super().__init__(kernel, space)
        self.pager = LazyPager(self.space)

    def mmap(self, size: int) -> int:
        pages = _pages(size)
        vpn = self.space.reserve(pages)
        self.pager.add_region(vpn, pages)
        self.blocks[vpn << PAGE_SHIFT] = pages
        return vpn << PAGE_SHIFT

    def munmap(self, base: int, size: int) -> None:
        pages = self._block(base, size)
        vpn = base >> PAGE_SHIFT
        frames = self._present_frames(vpn, pages)
        self.space.tlb_flush(vpn, pages)
        self.kernel.reclaim(self.pid, frames)
        self.pager.remove_region(vpn)
        self.space.release_reservation(vpn, pages)
        del self.blocks[base]

    def _shrink(self, vpn: int, pages: int, new_pages: int) -> None:
        frames = self._present_frames(vpn + new_pages, pages - new_pages)
        self.space.tlb_flush(vpn + new_pages, pages - new_pages)
        self.kernel.reclaim(self.pid, frames)
        self.space.release_reservation(vpn + new_pages, pages - new_pages)
        self.pager.remove_region(vpn)
        self.pager.add_region(vpn, new_pages)
        self.blocks[vpn << PAGE_SHIFT] = new_pages

    def _grow_in_place(self, vpn: int, pages: int, new_pages: int) -> None:
        self.space.reserve_at(vpn + pages, new_pages - pages)
        self.pager.remove_region(vpn)
        self.pager.add_region(vpn, new_pages)
        self.blocks[vpn << PAGE_SHIFT] = new_pages


class KernelNonPagedAllocator(_KernelAllocator):
    """Eager allocation: one kernel call fetches and clears every frame."""

    def _fetch(self, n: int) -> np.ndarray:
        frames = self.kernel.sys_exchange_pages(self.pid, [], [SizeClass.SMALL] * n)
        db = self.kernel.db
        stale = frames[db.dirty[frames]]
        if len(stale):
            db.memory.zero(stale)
            self.ledger.add_zeroed(len(stale) * SMALL_PAGE)
        return frames

    def mmap(self, size: int) -> int:
        pages = _pages(size)
        vpn = self.space.reserve(pages)
        try:
            frames = self._fetch(pages)
        except Exception:
            self.space.release_reservation(vpn, pages)
            raise
        self.space.map_pages(vpn, frames)
        self.blocks[vpn << PAGE_SHIFT] = pages
        return vpn << PAGE_SHIFT

    def munmap(self, base: int, size: int) -> None:
        pages = self._block(base, size)
        vpn = base >> PAGE_SHIFT
        frames = self.space.unmap_pages(vpn, pages)
        self.space.tlb_flush(vpn, pages)
        self.kernel.sys_exchange_pages(self.pid, frames, [])
        self.space.release_reservation(vpn, pages)
        del self.blocks[base]

    def _shrink(self, vpn: int, pages: int, new_pages: int) -> None:
        frames = self.space.unmap_pages(vpn + new_pages, pages - new_pages)
        self.space.tlb_flush(vpn + new_pages, pages - new_pages)
        self.kernel.sys_exchange_pages(self.pid, frames, [])
        self.space.release_reservation(vpn + new_pages, pages - new_pages)
        self.blocks[vpn << PAGE_SHIFT] = new_pages

    def _grow_in_place(self, vpn: int, pages: int, new_pages: int) -> None:
        self.space.reserve_at(vpn + pages, new_pages - pages)
        try:
            frames = self._fetch(new_pages - pages)
        except Exception:
            self.space.release_reservation(vpn + pages, new_pages - pages)
            raise
        self.space.map_pages(vpn + pages, frames)
        self.blocks[vpn << PAGE_SHIFT] = new_pages
