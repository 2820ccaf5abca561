"""Exception types shared across the package."""


class KVCodecError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(KVCodecError):
    """Inconsistent model geometry or mismatched shapes/modes."""


class BudgetError(KVCodecError):
    """Infeasible cache budget (e.g. budget below the observation window)."""


class FormatError(KVCodecError):
    """Malformed dump or archive file."""
