"""Exception taxonomy shared across the toolkit."""


class NsfError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(NsfError, ValueError):
    """An argument violates an operation's precondition."""


class OrientationError(NsfError):
    """The left-right axis cannot be identified from the affine."""


class FormatError(NsfError):
    """A file is not in the expected format (bad magic, malformed header)."""


class UnsupportedError(NsfError):
    """The file is recognized but uses a feature we do not support."""


class CorruptError(NsfError):
    """The file header is valid but the payload is truncated or inconsistent."""


class DegenerateInputError(NsfError):
    """Numerically degenerate input (no WM voxels, zero variance, ...)."""


class ContractError(NsfError):
    """A pluggable predictor violated the exchange-protocol contract."""


class DomainError(NsfError):
    """A value is outside the mathematical domain of an operation."""
