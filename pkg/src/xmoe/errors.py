"""Exception types shared across the package.

The CLI maps these onto exit codes: InputError/ConfigError -> 1,
NumericError -> 2. Verification failures are reported, not raised.
"""


class InputError(Exception):
    """Bad user-supplied data (missing file, empty corpus, bad token ids)."""


class ConfigError(Exception):
    """Invalid or inconsistent configuration."""


class NumericError(Exception):
    """A non-finite value appeared where the math requires finite ones."""
