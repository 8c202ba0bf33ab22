class HeurVidQAError(Exception):
    """Base class for every error raised by the pipeline (CLI exit code 2)."""


class ShapeError(HeurVidQAError, ValueError):
    pass


class DomainError(HeurVidQAError, ValueError):
    pass


class NumericError(HeurVidQAError, ArithmeticError):
    pass


class ArgumentError(HeurVidQAError, ValueError):
    pass


class ConfigurationError(HeurVidQAError, ValueError):
    pass


class StateError(HeurVidQAError, RuntimeError):
    pass


class DataError(HeurVidQAError, ValueError):
    pass


class FormatError(DataError):
    def __init__(self, message: str, offset: int = 0) -> None:
        super().__init__(f'{message} (at byte offset {offset})')
        self.offset = offset
