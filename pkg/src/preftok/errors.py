"""Error classes the CLI maps to distinct exit codes."""


class ConfigError(ValueError):
    """Bad configuration value or malformed config/override syntax."""


class DataError(RuntimeError):
    """Missing or inconsistent corpora, labels, or checkpoints."""
