"""Exception hierarchy shared by the simulator modules."""


class SimError(Exception):
    pass


class ConfigError(SimError, ValueError):
    pass


class OutOfMemory(SimError):
    """No candidate node could satisfy an allocation above its min watermark.

    ``kind`` is the :class:`~tierpt.topology.PageKind` that failed, so callers
    can tell a page-table OOM from a data OOM.
    """

    def __init__(self, kind, candidates=()):
        self.kind = kind
        self.candidates = tuple(candidates)
        super().__init__(f"out of memory allocating {kind.name} on nodes {list(self.candidates)}")


class DoubleFree(SimError):
    pass


class UnknownFrame(SimError, KeyError):
    pass


class NonCanonical(SimError, ValueError):
    pass


class NotMapped(SimError, KeyError):
    pass


class AlreadyMapped(SimError):
    pass


class StaleFrameRead(SimError):
    """A walk or data access touched a frame that is no longer allocated."""


class SimulationError(SimError):
    pass


class ParseError(SimError, ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


class TraceIoError(SimError, OSError):
    pass
