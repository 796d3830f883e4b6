"""Exception types shared across the package."""


class EmofuseError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(EmofuseError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class InputError(EmofuseError, ValueError):
    """User-supplied data (records, labels, vectors) is invalid."""


class ConfigError(EmofuseError, ValueError):
    """A configuration value violates its constraints."""


class GraphError(EmofuseError, ValueError):
    """A differentiation request violates the autodiff contract."""


class NumericError(EmofuseError, ArithmeticError):
    """A computation produced a non-finite value where finite was required."""


class CheckpointError(EmofuseError, ValueError):
    """Base for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointFormatError(CheckpointError):
    """Checkpoint file is truncated, unparseable, or has a bad payload."""


class CheckpointShapeError(CheckpointError):
    """A stored parameter does not match the shape the config implies."""
