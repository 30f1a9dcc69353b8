"""Exception types shared across the package.

The CLI maps these onto exit codes: InputError -> 2, ContractError and
ConfigError -> 3. Anything else is a bug and is allowed to crash.
"""


class InputError(Exception):
    """Bad user-supplied data: malformed files, out-of-domain values, OOV ids."""


class ContractError(Exception):
    """A caller violated an API contract (shape mismatch, empty clue set, ...)."""


class ConfigError(Exception):
    """An invalid or inconsistent configuration value."""
