"""Exception types raised across the package."""


class NagamError(Exception):
    """Base class for all package errors."""


class InputError(NagamError):
    """Bad or unreadable input data."""


class ConfigError(NagamError):
    """Invalid hyperparameters or flag combinations."""


class LookupFailure(NagamError):
    """A requested entity (concept, nodule) does not exist."""


# schema
class OutOfRange(InputError, ValueError):
    pass


class UnknownCode(InputError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# ingest
class MalformedRow(InputError):
    def __init__(self, message, line=None, column=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
        self.column = column


class MissingColumn(InputError):
    pass


class ScaleViolation(MalformedRow):
    pass


class DuplicateId(InputError):
    pass


class InvalidK(ConfigError, ValueError):
    pass


class MissingEmbeddings(InputError):
    def __init__(self, missing):
        self.missing = list(missing)
        preview = ", ".join(self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" (+{len(self.missing) - 10} more)"
        super().__init__(f"no embedding for nodule ids: {preview}{more}")


class EmptyDataset(InputError):
    pass


# numerics
class DimensionMismatch(InputError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class LengthMismatch(DimensionMismatch):
    pass


class StaleTape(NagamError, RuntimeError):
    pass


class SingularSystem(NagamError, ArithmeticError):
    pass


# models
class SchemaMismatch(InputError):
    pass


class UnknownConcept(LookupFailure, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class UnknownNoduleId(LookupFailure, KeyError):
    def __str__(self):
        return Exception.__str__(self)
