"""Simulated kernel: physical frame database, page exchange and upcalls.

Physical memory is a run of 4Kb slots.  A small frame is one slot and its
:data:`FrameId` is the slot index; a large frame is a 512-aligned group of
slots whose id is the index of its first slot.  Contents are kept per
physical small page (``ppn``) in a sparse store, so a large frame's bytes
are simply the bytes of its 512 constituent pages and converting between
frame sizes never moves data.

Cleanliness is also tracked per physical page: a page is *dirty* once a
holder has released it and stays dirty until it is cleared.  When frames
are issued to a process, exactly the dirty pages last held by some other
process are cleared (and charged).  Pages going back to their previous
owner keep their bytes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .costmodel import PAGES_PER_LARGE, SMALL_PAGE, CostLedger, CostModelParams
from .errors import NotOwner, OutOfPhysicalMemory, SimulationError, StillMapped

FrameId = int
ProcessId = int

_FREE, _HELD, _TAIL = 0, 1, 2
_MIXED = -1  # pool key for free large frames dirtied by several processes


class SizeClass(enum.Enum):
    SMALL = SMALL_PAGE
    LARGE = SMALL_PAGE * PAGES_PER_LARGE

    @property
    def nbytes(self) -> int:
        return self.value

    @property
    def small_pages(self) -> int:
        return self.value // SMALL_PAGE


class FrameState(enum.Enum):
    FREE_ZEROED = "FreeZeroed"
    FREE_DIRTY = "FreeDirty"
    HELD = "Held"


@dataclass(frozen=True)
class FrameRecord:
    id: FrameId
    size: SizeClass
    owner: Optional[ProcessId]
    state: FrameState


@dataclass(frozen=True)
class Severity:
    level: int

    def __post_init__(self):
        if not 1 <= int(self.level) <= 4:
            raise ValueError(f"severity level must be in [1, 4], got {self.level}")


class PhysicalMemory:
    """Sparse byte contents of every physical small page.

    A page's bytes are materialized into a ``bytearray`` on the first
    general write.  Bulk single-byte writes at one page offset (the
    benchmark traversal) go to a per-page "stripe" slot held in numpy
    arrays instead, so touching millions of pages never allocates them.
    """

    def __init__(self, npages: int):
        self.pages: dict[int, bytearray] = {}
        self.has_page = np.zeros(npages, dtype=bool)
        self.stripe_off = np.full(npages, -1, dtype=np.int16)
        self.stripe_val = np.zeros(npages, dtype=np.uint8)

    def _materialize(self, ppn: int) -> bytearray:
        page = self.pages.get(ppn)
        if page is None:
            page = bytearray(SMALL_PAGE)
            off = int(self.stripe_off[ppn])
            if off >= 0:
                page[off] = int(self.stripe_val[ppn])
                self.stripe_off[ppn] = -1
            self.pages[ppn] = page
            self.has_page[ppn] = True
        return page

    def read(self, ppn: int, offset: int, n: int = 1) -> bytes:
        page = self.pages.get(ppn)
        if page is not None:
            return bytes(page[offset:offset + n])
        out = bytearray(n)
        off = int(self.stripe_off[ppn])
        if offset <= off < offset + n:
            out[off - offset] = int(self.stripe_val[ppn])
        return bytes(out)

    def write(self, ppn: int, offset: int, data: bytes) -> None:
        page = self._materialize(ppn)
        page[offset:offset + len(data)] = data

    def write_stripe(self, ppns: np.ndarray, offset: int, value: int) -> None:
        has = self.has_page[ppns]
        if has.any():
            for p in ppns[has].tolist():
                self.pages[p][offset] = value
            ppns = ppns[~has]
        offs = self.stripe_off[ppns]
        clash = ppns[(offs >= 0) & (offs != offset)]
        for p in clash.tolist():
            self._materialize(p)[offset] = value
        if len(clash):
            ppns = ppns[~self.has_page[ppns]]
        self.stripe_off[ppns] = offset
        self.stripe_val[ppns] = value

    def zero(self, ppns: np.ndarray) -> None:
        has = self.has_page[ppns]
        if has.any():
            for p in ppns[has].tolist():
                del self.pages[p]
            self.has_page[ppns] = False
        self.stripe_off[ppns] = -1

    def is_zero(self, ppn: int) -> bool:
        page = self.pages.get(ppn)
        if page is not None:
            return not any(page)
        return self.stripe_off[ppn] < 0 or self.stripe_val[ppn] == 0


class FrameStack:
    """A LIFO of frame ids stored in a growable int64 array."""

    def __init__(self, ids: Iterable[int] = ()):
        arr = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
        self._buf = np.empty(max(16, len(arr)), dtype=np.int64)
        self._buf[:len(arr)] = arr
        self._n = len(arr)

    def __len__(self) -> int:
        return self._n

    def __bool__(self) -> bool:
        return self._n > 0

    def __iter__(self):
        return iter(self._buf[:self._n].tolist())

    def to_array(self) -> np.ndarray:
        return self._buf[:self._n].copy()

    def extend(self, ids) -> None:
        arr = np.asarray(ids, dtype=np.int64)
        need = self._n + len(arr)
        if need > len(self._buf):
            grown = np.empty(max(need, 2 * len(self._buf)), dtype=np.int64)
            grown[:self._n] = self._buf[:self._n]
            self._buf = grown
        self._buf[self._n:need] = arr
        self._n = need

    def append(self, fid: int) -> None:
        self.extend([fid])

    def pop(self) -> int:
        self._n -= 1
        return int(self._buf[self._n])

    def take(self, k: int) -> np.ndarray:
        """Remove up to ``k`` ids from the top, most recently pushed first."""
        k = min(k, self._n)
        out = self._buf[self._n - k:self._n][::-1].copy()
        self._n -= k
        return out

    def discard(self, lo: int, hi: int) -> None:
        """Drop every id in [lo, hi)."""
        live = self._buf[:self._n]
        keep = live[(live < lo) | (live >= hi)]
        self._n = len(keep)
        self._buf[:self._n] = keep


class FrameDatabase:
    """Ownership, cleanliness and free pools for every physical frame."""

    def __init__(self, small_frames: int):
        if small_frames <= 0:
            raise ValueError("frame database needs at least one frame")
        n = small_frames
        self.capacity = n
        self.memory = PhysicalMemory(n)
        self.state = np.zeros(n, dtype=np.uint8)
        self.owner = np.zeros(n, dtype=np.int32)
        self.large_head = np.zeros(n, dtype=bool)
        self.mapped = np.zeros(n, dtype=np.uint8)
        self.dirty = np.zeros(n, dtype=bool)
        self.last_owner = np.zeros(n, dtype=np.int32)
        self._scratch = np.zeros(n, dtype=np.int64)
        ngroups = -(-n // PAGES_PER_LARGE)
        self.group_free = np.bincount(np.arange(n) // PAGES_PER_LARGE, minlength=ngroups).astype(np.int32)
        # Pools are stacks; the top is the end of the list.
        self.small_zeroed = FrameStack(np.arange(n - 1, -1, -1))
        self.small_dirty: dict[int, FrameStack] = {}
        self.large_zeroed = FrameStack()
        self.large_dirty: dict[int, FrameStack] = {}
        self.free_small = n
        self.free_large = 0

    # -- queries -----------------------------------------------------------

    def has_duplicates(self, arr: np.ndarray) -> bool:
        """Whether in-range ids repeat; linear time via a scratch index."""
        pos = np.arange(len(arr), dtype=np.int64)
        self._scratch[arr] = pos
        return bool((self._scratch[arr] != pos).any())

    def is_frame(self, fid: int) -> bool:
        return 0 <= fid < self.capacity and self.state[fid] != _TAIL

    def size_of(self, fid: FrameId) -> SizeClass:
        return SizeClass.LARGE if self.large_head[fid] else SizeClass.SMALL

    def ppns(self, fid: FrameId) -> np.ndarray:
        if self.large_head[fid]:
            return np.arange(fid, fid + PAGES_PER_LARGE)
        return np.array([fid])

    def is_clean(self, fid: FrameId) -> bool:
        return not self.dirty[self.ppns(fid)].any()

    def record(self, fid: FrameId) -> FrameRecord:
        if not self.is_frame(fid):
            raise KeyError(fid)
        if self.state[fid] == _HELD:
            state, owner = FrameState.HELD, int(self.owner[fid])
        else:
            state = FrameState.FREE_ZEROED if self.is_clean(fid) else FrameState.FREE_DIRTY
            owner = None
        return FrameRecord(fid, self.size_of(fid), owner, state)

    def free_small_equivalents(self) -> int:
        return self.free_small + PAGES_PER_LARGE * self.free_large

    def held_small_equivalents(self) -> int:
        held = self.state == _HELD
        return int(held.sum() + (PAGES_PER_LARGE - 1) * (held & self.large_head).sum())

    # -- pool plumbing -----------------------------------------------------

    def _pool_key_large(self, head: int) -> Optional[int]:
        span = slice(head, head + PAGES_PER_LARGE)
        dirty = self.dirty[span]
        if not dirty.any():
            return None
        owners = np.unique(self.last_owner[span][dirty])
        return int(owners[0]) if len(owners) == 1 else _MIXED

    def _push_small(self, fids: Sequence[int]) -> None:
        if not len(fids):
            return
        arr = np.asarray(fids, dtype=np.int64)
        dirty = self.dirty[arr]
        if not dirty.any():
            self.small_zeroed.extend(arr)
            return
        self.small_zeroed.extend(arr[~dirty])
        d = arr[dirty]
        owners = self.last_owner[d]
        for o in np.unique(owners).tolist():
            self.small_dirty.setdefault(o, FrameStack()).extend(d[owners == o])

    def _push_large(self, head: int) -> None:
        key = self._pool_key_large(head)
        if key is None:
            self.large_zeroed.append(head)
        else:
            self.large_dirty.setdefault(key, FrameStack()).append(head)

    def _dirty_order(self, pools: dict[int, FrameStack], pid: int) -> list[FrameStack]:
        order = [pools[pid]] if pid in pools else []
        order += [pools[o] for o in sorted(pools) if o != pid]
        return order

    def _take_large_from_pools(self, pid: int) -> Optional[int]:
        for stack in [self.large_zeroed] + self._dirty_order(self.large_dirty, pid):
            if stack:
                self.free_large -= 1
                return stack.pop()
        return None

    def _split_large(self, head: int) -> None:
        span = np.arange(head, head + PAGES_PER_LARGE)
        self.large_head[head] = False
        self.state[span] = _FREE
        self.group_free[head // PAGES_PER_LARGE] = PAGES_PER_LARGE
        self.free_small += PAGES_PER_LARGE
        self._push_small(span[::-1])

    def _promote_group(self, g: int) -> int:
        head = g * PAGES_PER_LARGE
        for stack in [self.small_zeroed, *self.small_dirty.values()]:
            stack.discard(head, head + PAGES_PER_LARGE)
        self.state[head:head + PAGES_PER_LARGE] = _TAIL
        self.state[head] = _FREE
        self.large_head[head] = True
        self.group_free[g] = 0
        self.free_small -= PAGES_PER_LARGE
        return head

    def _promotable_groups(self) -> np.ndarray:
        return np.flatnonzero(self.group_free == PAGES_PER_LARGE)

    # -- transitions -------------------------------------------------------

    def feasible(self, n_small: int, n_large: int, released: Sequence[int] = ()) -> bool:
        """Whether a request fits once ``released`` frames are credited."""
        free_small, free_large = self.free_small, self.free_large
        group_free = self.group_free
        if len(released):
            arr = np.asarray(released, dtype=np.int64)
            large = self.large_head[arr]
            free_large += int(large.sum())
            smalls = arr[~large]
            free_small += len(smalls)
            if len(smalls):
                group_free = group_free + np.bincount(smalls // PAGES_PER_LARGE, minlength=len(group_free))
        promotable = int((group_free == PAGES_PER_LARGE).sum())
        if n_large > free_large + promotable:
            return False
        promoted = max(0, n_large - free_large)
        spare_large = max(0, free_large - n_large)
        return n_small <= free_small - PAGES_PER_LARGE * promoted + PAGES_PER_LARGE * spare_large

    def release(self, pid: int, fids: Sequence[int]) -> None:
        arr = np.asarray(fids, dtype=np.int64)
        if not len(arr):
            return
        large = self.large_head[arr]
        smalls = arr[~large]
        if len(smalls):
            self.state[smalls] = _FREE
            self.owner[smalls] = 0
            self.dirty[smalls] = True
            self.last_owner[smalls] = pid
            self.group_free += np.bincount(smalls // PAGES_PER_LARGE, minlength=len(self.group_free)).astype(np.int32)
            self.free_small += len(smalls)
            self.small_dirty.setdefault(pid, FrameStack()).extend(smalls)
        for head in arr[large].tolist():
            self.state[head] = _FREE
            self.owner[head] = 0
            self.dirty[head:head + PAGES_PER_LARGE] = True
            self.last_owner[head:head + PAGES_PER_LARGE] = pid
            self.free_large += 1
            self.large_dirty.setdefault(pid, FrameStack()).append(head)

    def issue(self, pid: int, n_small: int, n_large: int) -> tuple[np.ndarray, np.ndarray, int]:
        """Hand out frames to ``pid``; returns (smalls, larges, bytes cleared).

        Callers must check :meth:`feasible` first.
        """
        larges: list[int] = []
        for _ in range(n_large):
            head = self._take_large_from_pools(pid)
            if head is None:
                head = self._promote_group(int(self._promotable_groups()[0]))
            larges.append(head)

        parts: list[np.ndarray] = []
        need = n_small
        while need:
            progressed = False
            for stack in [self.small_zeroed] + self._dirty_order(self.small_dirty, pid):
                got = stack.take(need)
                if len(got):
                    parts.append(got)
                    need -= len(got)
                    progressed = True
                    if not need:
                        break
            if need and not progressed:
                head = self._take_large_from_pools(pid)
                if head is None:
                    raise OutOfPhysicalMemory("frame pools exhausted")
                self._split_large(head)
        self.small_dirty = {o: s for o, s in self.small_dirty.items() if s}
        self.large_dirty = {o: s for o, s in self.large_dirty.items() if s}

        cleared = 0
        smalls = np.concatenate(parts) if len(parts) > 1 else parts[0] if parts else np.empty(0, dtype=np.int64)
        if len(smalls):
            arr = smalls
            self.state[arr] = _HELD
            self.owner[arr] = pid
            self.group_free -= np.bincount(arr // PAGES_PER_LARGE, minlength=len(self.group_free)).astype(np.int32)
            self.free_small -= len(arr)
            cleared += self._clear_foreign(arr, pid)
        for head in larges:
            self.state[head] = _HELD
            self.owner[head] = pid
            cleared += self._clear_foreign(np.arange(head, head + PAGES_PER_LARGE), pid)
        return smalls, np.asarray(larges, dtype=np.int64), cleared

    def _clear_foreign(self, ppns: np.ndarray, pid: int) -> int:
        mask = self.dirty[ppns] & (self.last_owner[ppns] != pid)
        if not mask.any():
            return 0
        foreign = ppns[mask]
        self.memory.zero(foreign)
        self.dirty[foreign] = False
        return len(foreign) * SMALL_PAGE

    def validate_release(self, pid: int, fids: Sequence[int]) -> None:
        if not len(fids):
            return
        arr = np.asarray(fids, dtype=np.int64)
        in_range = (arr >= 0) & (arr < self.capacity)
        ok = in_range.copy()
        idx = arr[in_range]
        ok[in_range] = (self.state[idx] == _HELD) & (self.owner[idx] == pid)
        if not ok.all():
            raise NotOwner(f"frame {int(arr[~ok][0])} is not held by process {pid}")
        if self.has_duplicates(arr):
            raise NotOwner("a frame is released twice")
        mapped = self.mapped[arr] != 0
        if mapped.any():
            raise StillMapped(f"frame {int(arr[mapped][0])} is still mapped")

    def check(self) -> None:
        """Full audit of conservation and pool consistency; raises AssertionError."""
        small = np.concatenate([self.small_zeroed.to_array()] + [s.to_array() for s in self.small_dirty.values()])
        large = np.concatenate([self.large_zeroed.to_array()] + [s.to_array() for s in self.large_dirty.values()])
        assert not self.has_duplicates(small), "small frame on two lists"
        assert not self.has_duplicates(large), "large frame on two lists"
        assert not np.intersect1d(small, large).size
        assert len(small) == self.free_small and len(large) == self.free_large
        assert (self.state[small] == _FREE).all() and not self.large_head[small].any(), "bad small pool entry"
        assert (self.state[large] == _FREE).all() and self.large_head[large].all(), "bad large pool entry"
        free_eq = self.free_small_equivalents()
        assert free_eq + self.held_small_equivalents() == self.capacity, "conservation violated"
        held = self.state == _HELD
        assert (self.owner[held] > 0).all() and (self.owner[~held] == 0).all()


PressureHandler = Callable[[Severity], Sequence[FrameId]]


class Kernel:
    """The simulated kernel and its system calls.

    Each process gets a :class:`CostLedger`; the kernel charges kernel
    entries and cross-process zeroing to the calling process's ledger.
    """

    def __init__(self, small_frames: int, params: CostModelParams | None = None):
        self.params = params or CostModelParams()
        self.db = FrameDatabase(small_frames)
        self.ledgers: dict[ProcessId, CostLedger] = {}
        self.spaces: dict[ProcessId, object] = {}
        self._handlers: dict[ProcessId, PressureHandler] = {}
        self._next_pid = 1
        self.rejected_frames = 0

    @property
    def memory(self) -> PhysicalMemory:
        return self.db.memory

    def create_process(self) -> ProcessId:
        pid = self._next_pid
        self._next_pid += 1
        self.ledgers[pid] = CostLedger(self.params)
        return pid

    def _ledger(self, pid: ProcessId) -> CostLedger:
        try:
            return self.ledgers[pid]
        except KeyError:
            raise SimulationError(f"no such process {pid}") from None

    def sys_exchange_pages(
        self,
        caller: ProcessId,
        release: Sequence[FrameId] = (),
        request: Sequence[SizeClass] = (),
    ) -> np.ndarray:
        """Free ``release`` and hand back one frame per entry of ``request``.

        The result is an int64 array of frame ids in request order.

        All or nothing: on error nothing changes except the kernel-entry
        count, which is charged for every call.
        """
        ledger = self._ledger(caller)
        ledger.add_kernel_entry()
        db = self.db
        db.validate_release(caller, release)
        request = list(request)
        n_large = request.count(SizeClass.LARGE)
        n_small = len(request) - n_large
        if not db.feasible(n_small, n_large, release):
            raise OutOfPhysicalMemory(
                f"cannot supply {n_small} small and {n_large} large frames "
                f"({db.free_small_equivalents()} small-page equivalents free)"
            )
        db.release(caller, release)
        smalls, larges, cleared = db.issue(caller, n_small, n_large)
        if cleared:
            ledger.add_zeroed(cleared)
        if not n_large:
            return smalls
        if not n_small:
            return larges
        is_large = np.array([r is SizeClass.LARGE for r in request])
        out = np.empty(len(request), dtype=np.int64)
        out[is_large] = larges
        out[~is_large] = smalls
        return out

    # -- in-kernel paths used by the fault-driven baseline -------------------

    def fault_in(self, pid: ProcessId, n: int) -> np.ndarray:
        """Zero-filled small frames for the lazy page-fault path.

        Clearing is part of the modeled fault cost, so nothing is charged here.
        """
        db = self.db
        if not db.feasible(n, 0):
            raise OutOfPhysicalMemory(f"cannot fault in {n} pages")
        smalls, _, _ = db.issue(pid, n, 0)
        arr = smalls
        mask = db.dirty[arr]
        if mask.any():
            db.memory.zero(arr[mask])
            db.dirty[arr[mask]] = False
        return smalls

    def reclaim(self, pid: ProcessId, frames: Sequence[FrameId]) -> None:
        self.db.validate_release(pid, frames)
        self.db.release(pid, frames)

    # -- upcalls -------------------------------------------------------------

    def register_pressure_handler(self, proc: ProcessId, handler: PressureHandler) -> None:
        self._handlers[proc] = handler

    def sys_trigger_pressure(self, severity: Severity | int) -> int:
        """Ask every registered process to give frames back; returns small-page equivalents."""
        if not isinstance(severity, Severity):
            severity = Severity(severity)
        db = self.db
        total = 0
        for pid in sorted(self._handlers):
            accepted: list[int] = []
            seen: set[int] = set()
            for f in self._handlers[pid](severity):
                f = int(f)
                ok = (
                    f not in seen
                    and db.is_frame(f)
                    and db.state[f] == _HELD
                    and db.owner[f] == pid
                    and not db.mapped[f]
                )
                if ok:
                    accepted.append(f)
                    seen.add(f)
                else:
                    self.rejected_frames += 1
            db.release(pid, accepted)
            total += sum(db.size_of(f).small_pages for f in accepted)
        return total

    def register_watch(self, proc: ProcessId, vpns: Iterable[int], handler: Callable) -> None:
        """One-shot notification on the next access to each watched page."""
        try:
            space = self.spaces[proc]
        except KeyError:
            raise SimulationError(f"process {proc} has no address space") from None
        space.watch(vpns, handler)

    def check(self) -> None:
        self.db.check()
        seen: dict[int, int] = {}
        for pid, space in self.spaces.items():
            for f in space.mapped_frames():
                assert f not in seen, f"frame {f} mapped by {seen[f]} and {pid}"
                seen[f] = pid
                assert self.db.state[f] == _HELD and self.db.owner[f] == pid, f"frame {f} not held by {pid}"
        assert int((self.db.mapped > 0).sum()) == len(seen), "mapped-count drift"
