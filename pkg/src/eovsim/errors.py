class SimError(Exception):
    """Base class for simulator errors."""


class MalformedRange(SimError, ValueError):
    pass


class ConfigInvalid(SimError, ValueError):
    pass


class UnsupportedN(SimError, ValueError):
    pass


class PolicySyntaxError(SimError, ValueError):
    pass


class EmptySpec(SimError, ValueError):
    pass


class UnknownFunction(SimError, KeyError):
    pass


class RangeUnsupported(SimError, ValueError):
    pass


class MalformedTrace(SimError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class InsufficientData(SimError, ValueError):
    pass
