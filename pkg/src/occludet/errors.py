"""Shared exception types.

The CLI maps these onto stable exit codes (see ``occludet.cli``):
usage/config problems exit 1, malformed data exits 2, numeric failures exit 3.
"""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class ConfigError(ValueError):
    """Bad configuration: unknown key, unparsable value, invalid combination."""


class DataError(ValueError):
    """Malformed dataset, annotation record, or weight archive."""


class NumericError(RuntimeError):
    """Non-finite values encountered where finite ones are guaranteed."""
