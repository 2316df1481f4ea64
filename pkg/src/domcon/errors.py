"""Shared exception types mapped to CLI exit codes."""


class DataError(Exception):
    """Malformed input data (bad CSV row, dangling reference, bad checkpoint)."""


class DivergenceError(Exception):
    """Training produced a non-finite loss."""
