"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or incompatible model/checkpoint settings."""


class DataError(ValueError):
    """Bad input data: out-of-vocabulary text, empty manifests, infeasible targets."""


class FormatError(ValueError):
    """Malformed binary tensor, checkpoint or audio file."""


class ShapeError(ValueError):
    """Operand shapes do not agree."""
