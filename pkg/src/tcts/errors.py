"""Exception types shared across the package."""


class TctsError(Exception):
    """Base class for all package errors."""


class EmptyText(TctsError, ValueError):
    pass


class ShapeMismatch(TctsError, ValueError):
    pass


class NonFinite(TctsError, FloatingPointError):
    """Raised when an op or gradient produces NaN/Inf.

    ``node_id`` identifies the offending tape node (None outside a tape).
    """

    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class ModeViolation(TctsError):
    """Attribute-stream machinery used with student parameters, or vice versa."""


class MissingReferences(TctsError, ValueError):
    pass


class DegenerateCaption(TctsError, ValueError):
    pass


class DataContract(TctsError):
    pass


class ConfigError(TctsError):
    pass


class IncompatibleCheckpoint(TctsError):
    pass
