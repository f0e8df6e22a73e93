"""Exception types shared across the toolkit."""


class PCQAError(Exception):
    """Base class for all toolkit errors."""


class ParseError(PCQAError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFormat(PCQAError):
    pass


class EmptyInput(PCQAError):
    pass


class InvalidArgument(PCQAError, ValueError):
    pass


class ShapeMismatch(PCQAError, ValueError):
    pass


class EmptyBlock(PCQAError):
    pass


class ReprMismatch(PCQAError):
    pass


class InvalidState(PCQAError):
    pass


class TrainingDiverged(PCQAError):
    def __init__(self, step):
        self.step = step
        super().__init__(f"loss became non-finite at step {step}")


class DegenerateInput(PCQAError, ValueError):
    pass


class MissingData(PCQAError):
    def __init__(self, message, missing=()):
        self.missing = list(missing)
        super().__init__(message)


class NoUsableFeature(PCQAError):
    pass


class IoError(PCQAError, OSError):
    pass
