"""Exception types shared across modules; the CLI maps them to exit codes."""


class ConfigError(ValueError):
    """Invalid configuration value (exit code 2)."""


class CapacityError(ValueError):
    """Not enough prompts in the database for the request."""


class ModeError(RuntimeError):
    """Operation called in the wrong mode (training vs inference)."""


class DataError(RuntimeError):
    """Missing or malformed dataset / checkpoint on disk (exit code 3)."""
