"""Exception hierarchy shared by every layer of the simulator."""


class SimulationError(Exception):
    """Base class for all simulator errors."""


# kernel
class NotOwner(SimulationError):
    """A frame is not held by the calling process."""


class StillMapped(SimulationError):
    """A frame is still present in some page table."""


class OutOfPhysicalMemory(SimulationError):
    """The frame database cannot satisfy a request."""


class UnmappedPage(SimulationError):
    """A watch was requested on a page that is not present."""


# mmu
class AlreadyMapped(SimulationError):
    pass


class NotMapped(SimulationError):
    pass


class FrameAliased(SimulationError):
    """A frame would appear in two page-table entries."""


class RangeOverlap(SimulationError):
    pass


class AlignmentError(SimulationError):
    pass


class ConsistencyFault(SimulationError):
    """A TLB entry refers to a translation that no longer exists (missing flush)."""


class SegmentationFault(SimulationError):
    pass


class AddressSpaceExhausted(SimulationError):
    pass


class ReservationError(SimulationError):
    pass


# umpa
class InvalidSize(SimulationError):
    pass


class UnknownBlock(SimulationError):
    pass


class CannotGrowInPlace(SimulationError):
    pass


class NotReserved(SimulationError):
    pass


class AlreadyCommitted(SimulationError):
    pass


class NotCommitted(SimulationError):
    pass


class SizeMismatch(SimulationError):
    pass


# gp-alloc / batch
class UnknownAddress(SimulationError):
    pass


class DoubleFree(UnknownAddress):
    pass


# bench
class ConfigError(SimulationError):
    pass


class DomainError(SimulationError, ValueError):
    pass


class IoError(SimulationError):
    pass
