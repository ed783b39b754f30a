"""Exception hierarchy shared by every stage of the pipeline."""


class WhcnError(Exception):
    """Base class for all package errors."""


class NotSquare(WhcnError, ValueError):
    pass


class NotSymmetric(WhcnError, ValueError):
    pass


class ShapeMismatch(WhcnError, ValueError):
    pass


class NonFiniteEvaluation(WhcnError, ArithmeticError):
    pass


class InvalidConfig(WhcnError, ValueError):
    pass


class ParseError(WhcnError, ValueError):
    """Malformed text input; ``line`` is 1-based."""

    def __init__(self, line, message, token=None):
        self.line = line
        self.token = token
        detail = f"line {line}: {message}"
        if token is not None:
            detail += f" (bad token {token!r})"
        super().__init__(detail)


class EmptyCloud(WhcnError, ValueError):
    pass


class IoError(WhcnError, OSError):
    pass


class TooFewPoints(WhcnError, ValueError):
    pass


class InvalidK(WhcnError, ValueError):
    pass


class TooLarge(WhcnError, ValueError):
    pass


class EmptyCorpus(WhcnError, ValueError):
    pass


class EmptySceneLabels(WhcnError, ValueError):
    pass


class NoSeeds(WhcnError, ValueError):
    pass


class DegenerateHyperedge(WhcnError, ValueError):
    pass


class NoLabeledVertices(WhcnError, ValueError):
    pass


class LengthMismatch(WhcnError, ValueError):
    pass


class StageError(WhcnError, RuntimeError):
    """Wraps a failure raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
