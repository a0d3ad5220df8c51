"""Simulated user mode page allocation.

A deterministic model of a kernel frame database, a per-process MMU with
a two-level TLB, a user mode page allocator built on batched frame
exchange, a byte allocator layered on top, and benchmarks that compare
them against fault-driven kernel allocation using modeled cycles.
"""

from .batch import AllocationRequest, AllocationResult, BatchAllocator
from .baseline import KernelNonPagedAllocator, KernelPagedAllocator
from .bench import (
    AllocatorKind,
    BenchConfig,
    BinStats,
    SplitMix64,
    amdahl_speedup,
    run_faultcost,
    run_montecarlo,
    run_reallocbench,
    write_csv,
)
from .costmodel import CostLedger, CostModelParams, parse_cost_model
from .gpalloc import GpAllocator
from .kernel import FrameState, Kernel, Severity, SizeClass
from .mmu import AccessKind, AddressSpace, LazyPager
from .umpa import AllocFlags, UserPageAllocator

__all__ = [
    "AccessKind",
    "AddressSpace",
    "AllocFlags",
    "AllocationRequest",
    "AllocationResult",
    "AllocatorKind",
    "BatchAllocator",
    "BenchConfig",
    "BinStats",
    "CostLedger",
    "CostModelParams",
    "FrameState",
    "GpAllocator",
    "Kernel",
    "KernelNonPagedAllocator",
    "KernelPagedAllocator",
    "LazyPager",
    "Severity",
    "SizeClass",
    "SplitMix64",
    "UserPageAllocator",
    "amdahl_speedup",
    "parse_cost_model",
    "run_faultcost",
    "run_montecarlo",
    "run_reallocbench",
    "write_csv",
]
