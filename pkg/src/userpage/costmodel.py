"""Cycle charges and the deterministic cost ledger.

Every simulated action that costs time (a page fault, a TLB refill, a
page-table write, a kernel entry, clearing or copying bytes) is recorded
as a counter increment on a :class:`CostLedger`, which also accumulates
modeled cycles using the charges in :class:`CostModelParams`.  Because
the model is deterministic, ``ledger.cycles`` always equals
``ledger.expected_cycles()`` up to float rounding.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError

SMALL_PAGE = 4096
LARGE_PAGE = 2 * 1024 * 1024
PAGES_PER_LARGE = LARGE_PAGE // SMALL_PAGE


@dataclass(frozen=True)
class CostModelParams:
    fault_cost_cycles: float = 2800.0
    tlb_near_refill: float = 15.0
    tlb_far_refill: float = 230.0
    pte_write_cost: float = 1.0
    kernel_entry_cost: float = 1000.0
    zero_cost_per_page: float = 1000.0
    copy_cost_per_byte: float = 0.25
    byte_access_cost: float = 1.0
    tlb_flush_cost: float = 100.0
    # Faults inside a lazily paged region larger than this many pages pay
    # ``fault_surcharge_cycles`` on top of ``fault_cost_cycles``.
    fault_surcharge_above_pages: Optional[int] = None
    fault_surcharge_cycles: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None and value < 0:
                raise ConfigError(f"{f.name} must be non-negative, got {value}")

    @property
    def zero_cost_per_byte(self) -> float:
        return self.zero_cost_per_page / SMALL_PAGE

    def replace(self, **changes) -> "CostModelParams":
        return dataclasses.replace(self, **changes)


PROFILES = {
    "windows": CostModelParams(),
    "linux": CostModelParams(
        fault_cost_cycles=3100.0,
        fault_surcharge_above_pages=PAGES_PER_LARGE,
        fault_surcharge_cycles=3400.0,
    ),
}


def profile(name: str) -> CostModelParams:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def parse_cost_model(text: str, base: CostModelParams | None = None) -> CostModelParams:
    """Parse ``key = value`` lines (``#`` starts a comment) over ``base``.

    Unknown keys and malformed lines raise :class:`ConfigError`.
    """
    base = base or CostModelParams()
    known = {f.name for f in fields(CostModelParams)}
    changes: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key or not value:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown cost-model key {key!r}")
        try:
            if key == "fault_surcharge_above_pages":
                changes[key] = None if value.lower() in ("off", "none") else int(value)
            else:
                changes[key] = float(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
    return dataclasses.replace(base, **changes)


def load_cost_model(path: str | Path, base: CostModelParams | None = None) -> CostModelParams:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read cost model {path}: {exc}") from exc
    return parse_cost_model(text, base)


COUNTERS = (
    "faults",
    "surcharged_faults",
    "tlb_near_refills",
    "tlb_far_refills",
    "tlb_flushes",
    "pte_writes",
    "bytes_zeroed",
    "bytes_copied",
    "kernel_entries",
    "byte_accesses",
)


@dataclass
class CostLedger:
    """Monotone counters plus the modeled cycles they imply."""

    params: CostModelParams = field(default_factory=CostModelParams)
    cycles: float = 0.0
    faults: int = 0
    surcharged_faults: int = 0
    tlb_near_refills: int = 0
    tlb_far_refills: int = 0
    tlb_flushes: int = 0
    pte_writes: int = 0
    bytes_zeroed: int = 0
    bytes_copied: int = 0
    kernel_entries: int = 0
    byte_accesses: int = 0

    def add_faults(self, n: int = 1, surcharged: int = 0) -> None:
        p = self.params
        self.faults += n
        self.surcharged_faults += surcharged
        self.cycles += n * p.fault_cost_cycles + surcharged * p.fault_surcharge_cycles

    def add_refills(self, near: int = 0, far: int = 0) -> None:
        self.tlb_near_refills += near
        self.tlb_far_refills += far
        self.cycles += near * self.params.tlb_near_refill + far * self.params.tlb_far_refill

    def add_flush(self) -> None:
        self.tlb_flushes += 1
        self.cycles += self.params.tlb_flush_cost

    def add_pte_writes(self, n: int) -> None:
        self.pte_writes += n
        self.cycles += n * self.params.pte_write_cost

    def add_zeroed(self, nbytes: int) -> None:
        self.bytes_zeroed += nbytes
        self.cycles += nbytes * self.params.zero_cost_per_byte

    def add_copied(self, nbytes: int) -> None:
        self.bytes_copied += nbytes
        self.cycles += nbytes * self.params.copy_cost_per_byte

    def add_kernel_entry(self) -> None:
        self.kernel_entries += 1
        self.cycles += self.params.kernel_entry_cost

    def add_byte_accesses(self, n: int = 1) -> None:
        self.byte_accesses += n
        self.cycles += n * self.params.byte_access_cost

    def expected_cycles(self) -> float:
        """Recompute cycles from the counters alone."""
        p = self.params
        return (
            self.faults * p.fault_cost_cycles
            + self.surcharged_faults * p.fault_surcharge_cycles
            + self.tlb_near_refills * p.tlb_near_refill
            + self.tlb_far_refills * p.tlb_far_refill
            + self.tlb_flushes * p.tlb_flush_cost
            + self.pte_writes * p.pte_write_cost
            + self.bytes_zeroed * p.zero_cost_per_byte
            + self.bytes_copied * p.copy_cost_per_byte
            + self.kernel_entries * p.kernel_entry_cost
            + self.byte_accesses * p.byte_access_cost
        )

    def snapshot(self) -> dict[str, float]:
        snap = {name: getattr(self, name) for name in COUNTERS}
        snap["cycles"] = self.cycles
        return snap

    def delta(self, since: dict[str, float]) -> dict[str, float]:
        now = self.snapshot()
        return {k: now[k] - since[k] for k in now}
