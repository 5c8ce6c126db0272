"""Exception types shared across the package.

ConfigError and BudgetError map to CLI exit codes 2 and 3; everything else
is ordinary ValueError-style misuse.
"""


class GmfsError(Exception):
    """Base class for package-specific failures."""


class ConfigError(GmfsError):
    """Malformed or inconsistent experiment configuration."""


class BudgetError(GmfsError):
    """A computation was refused because it exceeds a configured budget
    (table size, exact-enumeration cap, 64-bit count overflow)."""
