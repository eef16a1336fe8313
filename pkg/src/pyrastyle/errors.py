"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
everything else -> 1.
"""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class DataError(ValueError):
    """Input data (files, directories, payloads) is missing or malformed."""


class ParseError(DataError):
    """A file could not be decoded; carries path and byte offset context."""

    def __init__(self, message, path=None, offset=None):
        detail = message
        if path is not None:
            detail += f" (file: {path}"
            if offset is not None:
                detail += f", byte offset {offset}"
            detail += ")"
        super().__init__(detail)
        self.path = path
        self.offset = offset


class TrainingError(RuntimeError):
    """A training step could not be completed."""
