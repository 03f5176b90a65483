"""Exception types shared across modules."""


class HygeiaError(Exception):
    """Base class for every error raised by this package."""


class CorruptStore(HygeiaError):
    """A persisted store file could not be read back.

    ``position`` is ``(line, column)`` when the XML parser could locate the
    problem, otherwise ``None``.
    """

    def __init__(self, message: str, position=None):
        super().__init__(message)
        self.position = position


class BindError(HygeiaError, OSError):
    """A server could not bind its listening socket."""
