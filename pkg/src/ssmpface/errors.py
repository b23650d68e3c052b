"""Exception types raised across the pipeline."""


class FaceError(Exception):
    """Base class for all errors raised by ssmpface."""


class ScanParseError(FaceError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}: "
        if line is not None:
            where += f"line {line}: "
        super().__init__(where + message)


class EmptyFaceError(FaceError):
    """A scan or cloud has no valid points left."""


class ConfigurationError(FaceError, ValueError):
    pass


class DegenerateGeometryError(FaceError):
    pass


class ContractError(FaceError, ValueError):
    """Inputs violate an operation's preconditions (shape or grid mismatch)."""


class ZeroNormError(FaceError, ZeroDivisionError):
    pass
