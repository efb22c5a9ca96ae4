"""Exception taxonomy shared across the package.

Exit-code mapping used by the CLI: configuration problems exit 2, data and
file-format problems exit 3, numeric failures exit 4.
"""


class SphereBoostError(Exception):
    """Base class for all package errors."""


class ConfigError(SphereBoostError):
    """Invalid configuration value or malformed config document."""


class ShapeError(SphereBoostError):
    """Array dimensions do not match the operation's contract."""


class DegenerateEmbeddingError(SphereBoostError):
    """Pre-normalization vector has near-zero norm; normalizing would be meaningless."""


class DomainError(SphereBoostError):
    """Scalar argument outside its mathematical domain (e.g. an angle beyond [0, pi])."""


class ContractError(SphereBoostError):
    """Caller violated a documented precondition (non-unit inputs, out-of-range values...)."""


class CoverageError(ContractError):
    """A per-sample mapping does not cover every required sample id."""


class NumericError(SphereBoostError):
    """Non-finite value encountered where the computation requires finite numbers."""


class DataFormatError(SphereBoostError):
    """Malformed binary or text artifact (bad magic, truncation); message carries the offset."""


class UnsupportedVersionError(DataFormatError):
    """Artifact was written with a format version this code does not read."""


class CorruptionError(DataFormatError):
    """Artifact checksum does not match its payload."""


class SchemaError(SphereBoostError):
    """Two reports do not share the same metric set and cannot be compared."""


class EmptyHardSetError(SphereBoostError):
    """A training variant requires misclassified samples but none exist."""
