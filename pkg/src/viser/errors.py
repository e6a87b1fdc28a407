"""Exception hierarchy shared by every viser module."""


class ViserError(Exception):
    """Base class for all library errors."""


class ZeroVector(ViserError, ValueError):
    pass


class NonFinite(ViserError, ValueError):
    pass


class DimensionMismatch(ViserError, ValueError):
    pass


class EmptyCorpus(ViserError, ValueError):
    pass


class DuplicateId(ViserError, ValueError):
    pass


class KeyViolation(ViserError, ValueError):
    """A reducer received a match keyed to a different labeled sample."""


class MissingLabels(ViserError, KeyError):
    pass


class CorpusFormatError(ViserError):
    """Malformed corpus file.

    ``line`` is 1-based for JSONL input; ``record`` and ``offset`` locate the
    failing record in binary input.
    """

    def __init__(self, message, *, path=None, line=None, record=None, offset=None):
        self.path = path
        self.line = line
        self.record = record
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if record is not None:
            where.append(f"record {record}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ShapeError(ViserError, ValueError):
    pass


class NonFiniteGradient(ViserError, ArithmeticError):
    pass


class DivergenceError(ViserError, ArithmeticError):
    def __init__(self, step, message="non-finite training loss"):
        self.step = step
        super().__init__(f"{message} at step {step}")


class EmptyEvaluation(ViserError, ValueError):
    pass


class UndefinedAP(ViserError, ValueError):
    """Average precision requested for a class with no positive samples."""
