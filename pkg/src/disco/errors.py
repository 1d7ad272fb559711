"""Exception taxonomy shared by the library and the CLI.

Each class maps to one CLI exit code (see cli.EXIT_CODES): configuration
problems, data/file problems, and numeric failures are distinct so scripts
can react to them without parsing messages.
"""


class DiscoError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DiscoError):
    """Invalid configuration: bad hyperparameters, incompatible shapes
    declared up front, malformed config files."""


class ShapeError(ConfigError):
    """Tensor shape mismatch detected at op boundaries."""


class DataError(DiscoError):
    """Broken input data: unreadable/malformed files, empty datasets,
    degenerate inputs such as an all-invalid mask."""


class NumericError(DiscoError):
    """Non-finite values produced where the contract requires finiteness
    (op outputs, losses, gradients)."""
