"""Exception hierarchy shared by the runtime modules."""


class PGASError(RuntimeError):
    """Base class for every error raised by the runtime."""


class ConfigError(PGASError, ValueError):
    """Invalid runtime, grid, solver or experiment configuration."""


class SegmentError(PGASError):
    """Access to a freed, unknown or foreign global memory segment."""


class BoundsError(SegmentError, IndexError):
    """An access falls outside ``[0, size_bytes)`` of its segment."""


class TeamError(PGASError):
    """Team membership or lifecycle violation."""


class CollectiveMismatch(PGASError):
    """Members of a team issued collectives in diverging order."""


class HandleError(PGASError):
    """A non-blocking handle was consumed twice or completed with a fault."""


class RoutingError(PGASError):
    """A transfer was routed onto a path it is not allowed to take."""


class RuntimeClosed(PGASError):
    """The runtime handle was used outside the lifetime of its launch."""


class RunAborted(PGASError):
    """Raised inside surviving units after another unit failed."""


class UnitFailure(PGASError):
    """A unit's entry procedure raised; carries the failing unit id."""

    def __init__(self, unit, exc):
        super().__init__(f"unit {unit} failed: {type(exc).__name__}: {exc}")
        self.unit = unit
        self.exc = exc
