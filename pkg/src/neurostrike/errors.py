"""Error types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid user-supplied configuration (bad field values, mismatched ids).

    CLI maps this to exit code 1; runtime failures map to exit code 2.
    """


class RuntimeFailure(RuntimeError):
    """Failure while executing an otherwise valid configuration (I/O, aborts)."""
