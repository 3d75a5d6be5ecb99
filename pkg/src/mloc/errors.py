"""Exception hierarchy shared across the package."""


class MlocError(Exception):
    """Base class for all errors raised by mloc."""


class ShapeError(MlocError, ValueError):
    """A tensor reached a layer with the wrong shape."""

    def __init__(self, layer_index, expected, actual, kind=None):
        self.layer_index = layer_index
        self.expected = expected
        self.actual = tuple(actual)
        self.kind = kind
        where = f"layer {layer_index}" + (f" ({kind})" if kind else "")
        super().__init__(f"{where}: expected input {expected}, got {self.actual}")


class BackwardError(MlocError, RuntimeError):
    """backward() was called without a retained forward pass."""


class FormatError(MlocError, ValueError):
    """A file did not match its declared text or binary format."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix += f"{path}"
        if line is not None:
            prefix += f":{line}"
        super().__init__(f"{prefix}: {message}" if prefix else message)


class DimensionError(FormatError):
    """An embedding row has the wrong number of components."""


class DuplicateIdError(FormatError):
    """An id appears more than once in a file that requires unique ids."""


class PreconditionError(MlocError, ValueError):
    """Inputs violate an operation's documented precondition."""
