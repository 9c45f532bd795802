"""Exception hierarchy shared by every ddian module."""


class DdianError(Exception):
    """Base class for all errors raised by ddian."""


class DimensionError(DdianError, ValueError):
    """Tensor or layer shapes do not agree."""


class ParameterError(DdianError, ValueError):
    """An operator received an argument outside its domain."""


class ContractError(DdianError, ValueError):
    """A caller violated a documented precondition."""


class ModelFormatError(DdianError):
    """A model file is truncated, corrupt, or of an unknown version."""


class ValidationError(DdianError, ValueError):
    """Bad user input: configuration, data files, labels, protocol misuse."""


class ConfigError(ValidationError):
    pass


class DataError(ValidationError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ProtocolError(ValidationError):
    """Evaluation protocol misuse, e.g. target data reaching the trainer."""
