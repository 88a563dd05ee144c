"""Shared exception types."""


class AgsearchError(Exception):
    """Base for all package-specific failures."""


class IngestError(AgsearchError):
    """Malformed or inconsistent observation records."""


class DataError(AgsearchError):
    """An observation lacks data a query concept requires."""


class ConfigurationError(AgsearchError):
    """A query references a concept the model bundle does not cover."""


class DegenerateArchiveError(AgsearchError):
    """Archive too small for the requested estimate."""


class DegenerateTrainingError(AgsearchError):
    """Training data cannot identify a model (e.g. single-class labels)."""


class InfeasibleRecallError(AgsearchError):
    """No threshold assignment can certify the requested recall."""


class OversizedInstanceError(AgsearchError):
    """Brute-force oracle refused an instance beyond its size guard."""


class PlacementError(AgsearchError):
    """Synthetic scene too small to place the requested activities."""
