"""Benchmark drivers over the simulator.

All timings are modeled cycles read off the process cost ledger, so
every run is exactly reproducible from its seed, configuration and cost
parameters.
"""

from __future__ import annotations

import enum
import io
import math
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import TextIO

from .baseline import KernelNonPagedAllocator, KernelPagedAllocator
from .costmodel import PAGES_PER_LARGE, SMALL_PAGE, CostModelParams
from .errors import ConfigError, DomainError, IoError
from .gpalloc import DEFAULT_CHUNK, GpAllocator
from .kernel import Kernel
from .mmu import AddressSpace
from .umpa import DEFAULT_CACHE_CAP, UserPageAllocator

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """The splitmix64 generator; one 64-bit output per call."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self, lo: int, hi: int) -> int:
        """Unbiased integer in [lo, hi] by rejection sampling."""
        span = hi - lo + 1
        if span <= 0:
            raise ValueError(f"empty range [{lo}, {hi}]")
        limit = (1 << 64) - (1 << 64) % span
        while True:
            x = self.next()
            if x < limit:
                return lo + x % span


class AllocatorKind(str, enum.Enum):
    KERNEL_PAGED = "KernelPaged"
    KERNEL_NON_PAGED = "KernelNonPaged"
    UMPA = "Umpa"
    GP_OVER_UMPA = "GpAllocOverUmpa"
    GP_OVER_KERNEL = "GpAllocOverKernel"

    @classmethod
    def parse(cls, name: str) -> "AllocatorKind":
        for kind in cls:
            if kind.value.lower() == name.lower():
                return kind
        raise ConfigError(f"unknown allocator {name!r}; choose from {[k.value for k in cls]}")


@dataclass(frozen=True)
class BenchConfig:
    seed: int = 42
    iterations: int = 20000
    ring_size: int = 512
    min_size: int = 4096
    max_size: int = 8 * 1024 * 1024
    allocator: AllocatorKind = AllocatorKind.UMPA
    preload_cache: bool = True
    cache_cap: int = DEFAULT_CACHE_CAP

    def __post_init__(self):
        if isinstance(self.allocator, str) and not isinstance(self.allocator, AllocatorKind):
            object.__setattr__(self, "allocator", AllocatorKind.parse(self.allocator))
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.ring_size < 1:
            raise ConfigError(f"ring size must be >= 1, got {self.ring_size}")
        if self.min_size < 1 or self.min_size > self.max_size:
            raise ConfigError(f"need 1 <= min <= max, got {self.min_size}..{self.max_size}")
        if self.cache_cap < 0:
            raise ConfigError(f"cache cap must be >= 0, got {self.cache_cap}")


@dataclass
class BinStats:
    bin_log2: int
    allocator: str
    samples: int = 0
    mean_alloc_cycles: float = 0.0
    mean_free_cycles: float = 0.0
    mean_traverse_cycles: float = 0.0
    mean_alloc_cycles_notraverse: float = 0.0
    mean_bytes_copied: float = 0.0


def size_bin(size: int) -> int:
    """Two-powers bin: floor(log2(size))."""
    return size.bit_length() - 1


def _pages(size: int) -> int:
    return -(-size // SMALL_PAGE)


class _Harness:
    """Uniform alloc/free over each allocator kind, sharing one address space."""

    def __init__(self, kind: AllocatorKind, kernel: Kernel, config: BenchConfig):
        self.kind = kind
        self.space = AddressSpace(kernel)
        self.ledger = self.space.ledger
        self._umpa: UserPageAllocator | None = None
        if kind in (AllocatorKind.UMPA, AllocatorKind.GP_OVER_UMPA):
            self._umpa = UserPageAllocator(kernel, self.space, capacity_cap=config.cache_cap)
            if config.preload_cache and config.cache_cap:
                self._umpa.preload(config.cache_cap)
        if kind == AllocatorKind.KERNEL_PAGED:
            self._pages = KernelPagedAllocator(kernel, self.space)
        elif kind == AllocatorKind.KERNEL_NON_PAGED:
            self._pages = KernelNonPagedAllocator(kernel, self.space)
        elif kind == AllocatorKind.GP_OVER_KERNEL:
            self._gp = GpAllocator(KernelPagedAllocator(kernel, self.space))
        elif kind == AllocatorKind.GP_OVER_UMPA:
            self._gp = GpAllocator(self._umpa)

    def alloc(self, size: int) -> int:
        k = self.kind
        if k == AllocatorKind.UMPA:
            return self._umpa.userpage_malloc(size)
        if k in (AllocatorKind.KERNEL_PAGED, AllocatorKind.KERNEL_NON_PAGED):
            return self._pages.mmap(size)
        return self._gp.gp_malloc(size)

    def free(self, addr: int, size: int) -> None:
        k = self.kind
        if k == AllocatorKind.UMPA:
            self._umpa.userpage_free(addr, size)
        elif k in (AllocatorKind.KERNEL_PAGED, AllocatorKind.KERNEL_NON_PAGED):
            self._pages.munmap(addr, size)
        else:
            self._gp.gp_free(addr)


def _kernel_with(frames: int, params: CostModelParams) -> Kernel:
    """A kernel with at least ``frames`` small frames plus one spare large group."""
    groups = -(-frames // PAGES_PER_LARGE) + 1
    return Kernel(groups * PAGES_PER_LARGE, params)


def _kernel_for(config: BenchConfig, params: CostModelParams) -> Kernel:
    live = config.ring_size * _pages(config.max_size)
    chunks = 2 * DEFAULT_CHUNK // SMALL_PAGE
    return _kernel_with(live + config.cache_cap + chunks, params)


@dataclass
class _Accumulator:
    samples: int = 0
    alloc: float = 0.0
    free_samples: int = 0
    free: float = 0.0
    traverse: float = 0.0
    copied: float = 0.0


def _finish(acc: dict[int, _Accumulator], allocator: str, null_per_op: float = 0.0) -> list[BinStats]:
    out = []
    for b in sorted(acc):
        a = acc[b]
        n = a.samples
        alloc = a.alloc / n - null_per_op if n else 0.0
        trav = a.traverse / n if n else 0.0
        out.append(BinStats(
            bin_log2=b,
            allocator=allocator,
            samples=n,
            mean_alloc_cycles=alloc,
            mean_free_cycles=a.free / a.free_samples - null_per_op if a.free_samples else 0.0,
            mean_traverse_cycles=trav,
            mean_alloc_cycles_notraverse=max(0.0, alloc - trav) if n else 0.0,
            mean_bytes_copied=a.copied / n if n else 0.0,
        ))
    return out


def null_loop_cycles(config: BenchConfig, ledger) -> float:
    """Ledger cycles of the benchmark loop with allocation and access elided."""
    rng = SplitMix64(config.seed)
    ring: deque[int] = deque()
    before = ledger.cycles
    for _ in range(config.iterations):
        size = rng.uniform(config.min_size, config.max_size)
        if len(ring) == config.ring_size:
            ring.popleft()
        ring.append(size)
    return ledger.cycles - before


def run_montecarlo(config: BenchConfig, params: CostModelParams | None = None) -> list[BinStats]:
    """Random sizes through a ring of live blocks, one byte written per page."""
    params = params or CostModelParams()
    if config.iterations == 0:
        return []
    kernel = _kernel_for(config, params)
    h = _Harness(config.allocator, kernel, config)
    ledger, space = h.ledger, h.space
    null = null_loop_cycles(config, ledger) / config.iterations

    rng = SplitMix64(config.seed)
    ring: deque[tuple[int, int]] = deque()
    acc: dict[int, _Accumulator] = {}
    for _ in range(config.iterations):
        size = rng.uniform(config.min_size, config.max_size)
        if len(ring) == config.ring_size:
            old_addr, old_size = ring.popleft()
            c0 = ledger.cycles
            h.free(old_addr, old_size)
            slot = acc.setdefault(size_bin(old_size), _Accumulator())
            slot.free += ledger.cycles - c0
            slot.free_samples += 1
        pages = _pages(size)
        c0 = ledger.cycles
        addr = h.alloc(size)
        traverse = space.traversal_cost(addr, pages)
        space.touch_pages(addr, pages)
        slot = acc.setdefault(size_bin(size), _Accumulator())
        slot.samples += 1
        slot.alloc += ledger.cycles - c0
        slot.traverse += traverse
        ring.append((addr, size))
    # Drain frees are not binned.
    for addr, size in ring:
        h.free(addr, size)
    return _finish(acc, config.allocator.value, null)


@dataclass
class FaultCostRow:
    size: int
    pages: int
    paged_faults: int
    paged_cycles_per_page: float
    nonpaged_cycles_per_page: float
    paged_cycles_per_page_notraverse: float
    nonpaged_cycles_per_page_notraverse: float

    @property
    def ratio(self) -> float:
        denom = self.nonpaged_cycles_per_page_notraverse
        return math.inf if denom == 0 else self.paged_cycles_per_page_notraverse / denom


def _lifecycle(space: AddressSpace, alloc, free, pages: int) -> tuple[float, float, int]:
    """(total cycles, modeled traversal, faults) of alloc + touch + free."""
    ledger = space.ledger
    c0, f0 = ledger.cycles, ledger.faults
    addr = alloc()
    traverse = space.traversal_cost(addr, pages)
    space.touch_pages(addr, pages)
    free(addr)
    return ledger.cycles - c0, traverse, ledger.faults - f0


def run_faultcost(
    config: BenchConfig, params: CostModelParams | None = None, sizes: Sequence[int] = (16384,)
) -> list[FaultCostRow]:
    """Per-page cost of a lazily faulted block against an eagerly mapped one."""
    params = params or CostModelParams()
    for s in sizes:
        if s <= 0 or s % SMALL_PAGE:
            raise ConfigError(f"fault-cost sizes must be positive page multiples, got {s}")
    biggest = max(sizes, default=SMALL_PAGE) // SMALL_PAGE
    kernel = _kernel_with(2 * biggest + max(config.cache_cap, biggest), params)
    paged = KernelPagedAllocator(kernel)
    umpa = UserPageAllocator(kernel, capacity_cap=max(config.cache_cap, biggest))
    umpa.preload(max(config.cache_cap, biggest))
    rows = []
    for size in sizes:
        pages = size // SMALL_PAGE
        pc, pt, pf = _lifecycle(paged.space, lambda: paged.mmap(size), lambda a: paged.munmap(a, size), pages)
        nc, nt, _ = _lifecycle(umpa.space, lambda: umpa.userpage_malloc(size), lambda a: umpa.userpage_free(a, size), pages)
        rows.append(FaultCostRow(
            size=size,
            pages=pages,
            paged_faults=pf,
            paged_cycles_per_page=pc / pages,
            nonpaged_cycles_per_page=nc / pages,
            paged_cycles_per_page_notraverse=max(0.0, pc - pt) / pages,
            nonpaged_cycles_per_page_notraverse=max(0.0, nc - nt) / pages,
        ))
    return rows


def realloc_sizes(config: BenchConfig) -> list[int]:
    lo = max(config.min_size, SMALL_PAGE)
    k = max(size_bin(lo), 12)
    if 1 << k < lo:
        k += 1
    out = []
    while 1 << k <= config.max_size:
        out.append(1 << k)
        k += 1
    return out


def run_reallocbench(
    config: BenchConfig, params: CostModelParams | None = None, samples: int | None = None
) -> list[BinStats]:
    """Doubling a block whose neighbour is taken: remapping against allocate+copy+free."""
    params = params or CostModelParams()
    samples = samples or max(1, min(config.iterations, 4))
    sizes = realloc_sizes(config)
    biggest = _pages(max(sizes, default=SMALL_PAGE))
    cap = max(config.cache_cap, 6 * biggest)
    kernel = _kernel_with(2 * cap, params)
    umpa = UserPageAllocator(kernel, capacity_cap=cap)
    if config.preload_cache:
        umpa.preload(cap)
    ledger, space = umpa.ledger, umpa.space
    base_acc: dict[int, _Accumulator] = {}
    umpa_acc: dict[int, _Accumulator] = {}
    rng = SplitMix64(config.seed)
    for size in sizes:
        b = size_bin(size)
        for _ in range(samples):
            fill = rng.next() & 0xFF
            for acc, relocate in ((base_acc, False), (umpa_acc, True)):
                addr = umpa.userpage_malloc(size)
                blocker = umpa.userpage_malloc(SMALL_PAGE)
                space.touch_pages(addr, _pages(size), fill)
                snap = ledger.snapshot()
                if relocate:
                    new = umpa.userpage_realloc(addr, size, 2 * size)
                else:
                    new = umpa.userpage_malloc(2 * size)
                    space.copy_bytes(new, addr, size)
                    umpa.userpage_free(addr, size)
                d = ledger.delta(snap)
                c0 = ledger.cycles
                umpa.userpage_free(new, 2 * size)
                slot = acc.setdefault(b, _Accumulator())
                slot.samples += 1
                slot.alloc += d["cycles"]
                slot.copied += d["bytes_copied"]
                slot.free += ledger.cycles - c0
                slot.free_samples += 1
                umpa.userpage_free(blocker, SMALL_PAGE)
    return _finish(base_acc, "Baseline") + _finish(umpa_acc, "Umpa")


def amdahl_speedup(p: float, s: float) -> float:
    """Overall speedup when a fraction ``p`` of run time is sped up ``s`` times."""
    if not (0.0 <= p <= 1.0):
        raise DomainError(f"fraction must lie in [0, 1], got {p}")
    if not s > 0:
        raise DomainError(f"speedup must be positive, got {s}")
    return 1.0 / ((1.0 - p) + p / s)


CSV_HEADER = "bin_log2,allocator,samples,alloc_cycles,free_cycles,traverse_cycles,alloc_cycles_notraverse"


def format_csv(stats: Iterable[BinStats]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for s in sorted(stats, key=lambda s: (s.bin_log2, s.allocator)):
        buf.write(
            f"{s.bin_log2},{s.allocator},{s.samples},{s.mean_alloc_cycles:.6f},{s.mean_free_cycles:.6f},"
            f"{s.mean_traverse_cycles:.6f},{s.mean_alloc_cycles_notraverse:.6f}\n"
        )
    return buf.getvalue()


def write_csv(stats: Iterable[BinStats], destination: str | Path | TextIO) -> None:
    text = format_csv(stats)
    if hasattr(destination, "write"):
        try:
            destination.write(text)
        except OSError as exc:
            raise IoError(f"cannot write CSV: {exc}") from exc
        return
    try:
        with open(destination, "w", newline="") as f:
            f.write(text)
    except OSError as exc:
        raise IoError(f"cannot write CSV to {destination}: {exc}") from exc
