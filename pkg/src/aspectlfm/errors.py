"""Exception types shared across the pipeline.

The CLI maps these onto process exit codes: ``ConfigError`` -> 1,
``DataError`` -> 2, anything else -> 3.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Input data or a persisted artifact is missing, malformed or stale."""


class ContractError(ValueError):
    """A function was called with arguments violating its preconditions."""


class TrainingDiverged(FloatingPointError):
    """A parameter became non-finite during optimization."""
