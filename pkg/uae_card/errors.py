"""Exception hierarchy shared by every module of the estimator."""


class UaeError(Exception):
    """Root of all errors raised by uae_card."""


class ValidationError(UaeError, ValueError):
    """Input or configuration violates a documented precondition."""


class ShapeError(ValidationError):
    """Tensor shapes do not agree for the requested operation."""


class ContractError(ValidationError):
    """A function was called outside its contract (e.g. non-scalar loss)."""


class ParseError(ValidationError):
    """A CSV, JSON Lines or binary file could not be parsed."""


class DictionaryError(ValidationError):
    """A raw value or code is not part of a column dictionary."""


class RegionTooLargeError(ValidationError):
    """Exhaustive enumeration was asked for a region above the cap."""


class WorkloadError(ValidationError):
    """A workload is empty or cannot be generated for the schema."""


class NumericError(UaeError, ArithmeticError):
    """A numerical computation produced an unusable value."""


class DegenerateDistributionError(NumericError):
    """A categorical row has no admissible entry (all logits masked)."""
