"""Batch allocation and relocation-free resizing over :class:`GpAllocator`.

``batch_alloc`` plans the whole batch against a copy of the free lists,
checks that the page layer can back every new chunk and direct block,
and only then allocates; a failure part-way still frees everything it
made.  ``batch_free`` validates every address before freeing any and
merges free neighbours in one pass at the end.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

from .costmodel import SMALL_PAGE
from .errors import InvalidSize, OutOfPhysicalMemory, UnknownAddress
from .gpalloc import HEADER, GpAllocator, round_up
from .umpa import AllocFlags

# Planning places imaginary chunks far above any real address.
_PLAN_BASE = 1 << 62


@dataclass(frozen=True)
class AllocationRequest:
    size: int
    alignment: int = HEADER
    flags: AllocFlags = field(default_factory=AllocFlags)

    def __post_init__(self):
        if self.size <= 0:
            raise InvalidSize(f"size must be positive, got {self.size}")
        if self.alignment < HEADER or self.alignment & (self.alignment - 1):
            raise ValueError(f"alignment must be a power of two >= {HEADER}, got {self.alignment}")


@dataclass(frozen=True)
class AllocationResult:
    address: int
    actual_size: int


class BatchAllocator:
    def __init__(self, gp: GpAllocator):
        self.gp = gp

    def plan(self, requests: Sequence[AllocationRequest]) -> tuple[int, int]:
        """(new arena chunks, direct pages) the batch would need."""
        gp = self.gp
        lists = gp.free_lists.copy()
        chunks = direct_pages = 0
        for req in requests:
            if not gp.is_arena_size(req.size):
                direct_pages += math.ceil(req.size / SMALL_PAGE)
                continue
            need = HEADER + round_up(req.size, HEADER)
            start = lists.find(need, req.alignment)
            if start is None:
                base = _PLAN_BASE + chunks * gp.chunk_size
                lists.insert(base, gp.chunk_size, base)
                chunks += 1
                start = lists.find(need, req.alignment)
            lists.carve(start, need, req.alignment)
        return chunks, direct_pages

    def _feasible(self, chunks: int, direct_pages: int) -> bool:
        pages = self.gp.pages
        can_supply = getattr(pages, "can_supply", None)
        if can_supply is None:
            return True
        return can_supply(chunks * (self.gp.chunk_size // SMALL_PAGE) + direct_pages)

    def batch_alloc(self, requests: Sequence[AllocationRequest]) -> list[AllocationResult]:
        requests = list(requests)
        if not requests:
            return []
        chunks, direct_pages = self.plan(requests)
        if not self._feasible(chunks, direct_pages):
            raise OutOfPhysicalMemory(f"batch needs {chunks} chunks and {direct_pages} direct pages")
        gp = self.gp
        done: list[int] = []
        try:
            for req in requests:
                done.append(gp.gp_malloc(req.size, req.alignment, req.flags.zeroed))
        except Exception:
            for addr in reversed(done):
                gp.gp_free(addr)
            raise
        return [AllocationResult(a, gp.usable_size(a)) for a in done]

    def batch_free(self, addresses: Sequence[int]) -> None:
        gp = self.gp
        seen: set[int] = set()
        for addr in addresses:
            if addr in seen:
                raise UnknownAddress(f"{addr:#x} appears twice in the batch")
            seen.add(addr)
            if addr not in gp.direct:
                gp._lookup(addr)
        arena_freed = False
        for addr in addresses:
            if addr in gp.direct:
                gp.gp_free(addr)
            else:
                gp._arena_release(addr, gp.live[addr], coalesce=False)
                arena_freed = True
        if arena_freed:
            gp.free_lists.rebuild_coalesced()
            gp.coalesce_passes += 1

    def try_resize_in_place(self, address: int, new_size: int) -> bool:
        return self.gp.resize_in_place(address, new_size)
