"""Exception types shared across the package."""


class FsdlreError(Exception):
    """Base class for all package errors."""


class SchemaError(FsdlreError):
    """Input file does not match the expected schema (names the offending path)."""


class InvariantError(FsdlreError):
    """A loaded or constructed object violates a structural invariant."""


class ConfigError(FsdlreError):
    """Bad or unknown configuration key/value."""


class SamplingExhaustedError(FsdlreError):
    """Episode rejection sampling hit its attempt bound without success."""


class DegenerateOverlapError(FsdlreError):
    """Head/tail attention distributions have (numerically) disjoint support."""


class UndefinedRateError(FsdlreError):
    """NOTA rate is undefined (query document has fewer than 2 entities)."""


class VersionMismatchError(FsdlreError):
    """Episode file carries an unknown schema version."""


class NumericError(FsdlreError):
    """Non-finite value encountered during training/evaluation."""
