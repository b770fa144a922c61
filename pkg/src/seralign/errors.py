"""Exception types shared across the package.

Every error raised by seralign derives from SeralignError so callers can
catch the whole family at the CLI boundary and emit a structured record.
"""


class SeralignError(Exception):
    """Base class for all seralign errors."""


class ConfigurationError(SeralignError):
    """Invalid configuration or precondition (bad generation values, N < K, ...)."""


class DimensionError(SeralignError):
    """Operand shapes do not conform; the message names both shapes."""


class NumericError(SeralignError):
    """Non-finite value detected, or a numeric step had to be aborted."""


class LabelError(SeralignError):
    """A label or cluster code lies outside its valid range."""


class InputError(SeralignError):
    """Operation inputs are malformed (length mismatch, empty set, ...)."""


class ParseError(SeralignError):
    """A persisted file is malformed; the message names the offending record."""


class CoverageError(SeralignError):
    """Required per-utterance data is missing; the message lists the ids."""


class ProvenanceError(SeralignError):
    """Artifact lineage does not match (wrong codebook, checkpoint, or layer)."""


class FoldError(SeralignError):
    """Cross-validation fold structure is invalid or a partition is empty."""
