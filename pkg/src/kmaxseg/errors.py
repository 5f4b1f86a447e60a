"""Exception types shared across the package.

Argument problems use the built-in ValueError; the classes here cover the
remaining error categories surfaced through the CLI exit codes.
"""


class FormatError(Exception):
    """A file (volume payload, header, config) is malformed."""


class ConfigError(Exception):
    """A configuration is internally inconsistent or unsupported."""


class NumericError(Exception):
    """A computation hit a numerically invalid state (non-finite, zero norm)."""
