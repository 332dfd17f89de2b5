"""Exception hierarchy shared by every layer of the simulator."""


class VicSimError(Exception):
    pass


# -- guest memory ---------------------------------------------------------

class OutOfGuestMemory(VicSimError):
    pass


class Misaligned(VicSimError):
    pass


class AlreadyMapped(VicSimError):
    pass


class NonCanonicalAddress(VicSimError):
    pass


class InvalidAddress(VicSimError):
    pass


class PageNotPresent(VicSimError):
    def __init__(self, level, gva=None):
        self.level = level
        self.gva = gva
        where = "" if gva is None else f" for gva {gva:#x}"
        super().__init__(f"page not present at level {level}{where}")


class WriteProtected(VicSimError):
    pass


class NoSuchProcess(VicSimError):
    pass


# -- SLAT / events --------------------------------------------------------

class DuplicateMapping(VicSimError):
    pass


class UnmappedFrame(VicSimError):
    pass


class HugePageUnsupported(VicSimError):
    pass


class SlatViolationUnhandled(VicSimError):
    pass


class RecursiveGuestEntry(VicSimError):
    pass


class NoSuchGuard(VicSimError):
    pass


# -- introspection --------------------------------------------------------

class SessionBusy(VicSimError):
    pass


# -- input channel --------------------------------------------------------

class ChannelClosed(VicSimError):
    pass


class EndpointUnavailable(VicSimError):
    pass


# -- game / cheats --------------------------------------------------------

class OffsetsError(VicSimError):
    pass


class StaleOffsets(VicSimError):
    pass


class InvalidMatrix(VicSimError):
    pass


class IncompatibleAtRuntime(VicSimError):
    pass


class LengthMismatch(VicSimError):
    pass


class ExecuteProtected(VicSimError):
    pass
