"""Exception types raised across the engine."""


class SparseCLError(Exception):
    """Base class; carries an optional mapping of context fields."""

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = dict(context)

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self), **self.context}


class DimensionError(SparseCLError, ValueError):
    pass


class NumericError(SparseCLError, FloatingPointError):
    pass


class ArgumentError(SparseCLError, ValueError):
    pass


class StateError(SparseCLError, RuntimeError):
    pass


class FormatError(SparseCLError, ValueError):
    """Malformed input file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None, **context):
        super().__init__(message, offset=offset, **context)
        self.offset = offset
