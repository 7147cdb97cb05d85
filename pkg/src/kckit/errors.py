"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: configuration/input problems exit 2,
backend transport problems exit 3.
"""


class KckitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(KckitError):
    """Bad input file, malformed record, or inconsistent configuration."""


class BackendError(KckitError):
    """A scoring backend failed (transport, protocol, or server side)."""


class CapabilityError(BackendError):
    """An operation was requested that the backend does not support."""


class EmptyGenerationError(KckitError):
    """A generation produced no usable text after stop-character stripping."""
