"""Shared error types, mapped to process exit codes by the CLI."""


class ConfigError(ValueError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class DataError(RuntimeError):
    """Runtime data failure: I/O, checksum, divergence (CLI exit code 3)."""
