"""Exception hierarchy shared across the simulator."""


class CpsMonError(Exception):
    """Base class for every error raised by this package."""


# event calculus
class DuplicateOccurrence(CpsMonError):
    pass


class TickBeyondHorizon(CpsMonError):
    pass


class UnknownFluent(CpsMonError):
    pass


class InvalidInterval(CpsMonError):
    pass


class MalformedPattern(CpsMonError):
    pass


class ConflictingRule(CpsMonError):
    pass


# streams
class NonMonotonicTick(CpsMonError):
    pass


class EmptyWindow(CpsMonError):
    pass


class SkippedTick(CpsMonError):
    pass


# monitor core
class UnregisteredStream(CpsMonError):
    pass


class UnknownVertex(CpsMonError):
    pass


class CycleWithoutDelay(CpsMonError):
    pass


class FrozenMonitorError(CpsMonError):
    """Raised when something tries to alter a monitor after simulation start."""


# plant
class InsufficientEdges(CpsMonError):
    pass


class UnknownSensor(CpsMonError):
    pass


class AddressOutOfRange(CpsMonError):
    pass


# monitors
class MitigationFailed(CpsMonError):
    pass


class MitigationPrecondition(CpsMonError):
    pass


class ShapeMismatch(CpsMonError):
    pass


class UnknownBranchSite(CpsMonError):
    pass


# harness / cli
class UnknownTarget(CpsMonError):
    pass


class ParseError(CpsMonError):
    def __init__(self, message, *, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class CorruptLog(CpsMonError):
    pass
