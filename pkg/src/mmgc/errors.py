"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage problems -> 1, data/format
problems -> 2, numeric failures -> 3.
"""


class MMGCError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(MMGCError, ValueError):
    pass


class NumericError(MMGCError, ArithmeticError):
    """A forward or backward pass produced NaN/Inf."""


class DegenerateVector(NumericError):
    """L2-normalization of a (near) zero vector; usually a dead projector."""


class GraphError(MMGCError, RuntimeError):
    pass


class MaskError(MMGCError, ValueError):
    """Every key of some query row is masked out."""


class VariantMismatch(MMGCError, ValueError):
    pass


class InvalidParams(MMGCError, ValueError):
    pass


class TooFewSamples(InvalidParams):
    pass


class EmptyCorpus(MMGCError, ValueError):
    pass


class InvalidStep(MMGCError, ValueError):
    pass


class ConfigError(MMGCError, ValueError):
    """Unknown key or malformed value in a run configuration."""


class ConfigMismatch(MMGCError, ValueError):
    """Checkpoint architecture does not fit the dataset it is applied to."""


class FormatError(MMGCError, ValueError):
    """Corrupted or truncated on-disk artifact."""


class DataIOError(MMGCError, OSError):
    pass
