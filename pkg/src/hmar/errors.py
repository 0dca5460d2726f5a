"""Exception types raised across the package."""


class HMARError(Exception):
    pass


class DimensionError(HMARError, ValueError):
    pass


class ContractError(HMARError, RuntimeError):
    """An operation was called outside its documented preconditions."""


class DataError(HMARError, ValueError):
    """Malformed or out-of-domain interaction data."""

    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class ConfigError(HMARError, ValueError):
    pass


class CheckpointError(HMARError, ValueError):
    pass


class NumericError(HMARError, FloatingPointError):
    pass
