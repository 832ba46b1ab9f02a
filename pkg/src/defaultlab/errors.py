"""Exception hierarchy shared by every module.

The CLI maps the three top-level families onto exit codes
(config -> 2, data -> 3, model -> 4).
"""


class DefaultLabError(Exception):
    """Base class for all package errors."""


class ConfigError(DefaultLabError, ValueError):
    """Invalid run configuration. ``field`` is a dotted path into the config."""

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class DataError(DefaultLabError, ValueError):
    pass


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        super().__init__(message)


class EmptyInputError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class SplitError(DataError):
    pass


class UndefinedRowError(DataError):
    def __init__(self, state):
        self.state = state
        super().__init__(f"transition row for state {state!r} has no observations")


class ModelError(DefaultLabError, ValueError):
    pass


class DimensionError(ModelError):
    pass


class StaleCacheError(ModelError):
    pass


class MissingModelError(ModelError, FileNotFoundError):
    pass
