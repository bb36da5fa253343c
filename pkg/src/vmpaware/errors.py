"""Exception hierarchy shared by every stage of the pipeline."""


class VmpError(Exception):
    """Base class for all domain errors raised by this package."""


class ParseError(VmpError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ExecError(VmpError):
    pass


class StepLimitExceeded(ExecError):
    pass


class MemoryOutOfRange(ExecError):
    pass


class UnsupportedOpcode(ExecError):
    pass


class VirtualizeError(VmpError):
    pass


class TrainingDiverged(VmpError):
    pass
