"""Exception types raised across the package."""


class DecaError(Exception):
    pass


class DataError(DecaError):
    """Input data violates a value constraint."""


class ParseError(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ConfigError(DecaError):
    pass


class SamplingError(DecaError):
    pass


class ContractError(DecaError):
    pass


class DivergenceError(DecaError):
    pass


class ComparisonError(DecaError):
    pass


class SchemaError(DecaError):
    pass


class EmptyCleanTestWarning(UserWarning):
    pass


class CoverageWarning(UserWarning):
    pass
