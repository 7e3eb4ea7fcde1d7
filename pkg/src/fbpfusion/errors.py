"""Exception classes shared across the package."""


class FBPError(Exception):
    """Base class for all package errors."""


class DimensionError(FBPError, ValueError):
    """Shapes of operands do not agree with an operation's contract."""


class ContractError(FBPError, RuntimeError):
    """An API was used outside its contract (wrong state, missing grads...)."""


class InputError(FBPError, ValueError):
    """Input data is semantically invalid (empty, too short, unknown id)."""


class FormatError(FBPError, ValueError):
    """A file does not follow its binary or text format."""


class ConfigError(FBPError, ValueError):
    """A run configuration is malformed or holds invalid values."""


class LoadError(InputError):
    """A manifest or dataset failed validation while loading."""
