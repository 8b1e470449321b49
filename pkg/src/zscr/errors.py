"""Exception hierarchy shared by all zscr modules."""


class ZscrError(Exception):
    """Base class for all errors raised by this package."""


# --- tensor / autodiff ---


class ShapeMismatch(ZscrError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ZscrError):
    """Input lies outside the mathematical domain of the operation."""


class ZeroVector(ZscrError):
    """A vector with near-zero norm was passed where a direction is needed."""


class EmptyTensor(ZscrError):
    """A reduction was requested over a tensor with no elements."""


class NonScalarLoss(ZscrError):
    """backward() requires a scalar (0-d) loss tensor."""


class NonFiniteError(ZscrError):
    """An operation produced NaN or Inf from finite inputs."""


# --- datasets ---


class SpecInvalid(ZscrError):
    """Synthetic dataset specification violates its invariants."""


class CenterSamplingFailed(ZscrError):
    """Rejection sampling of class centers exceeded the retry budget."""


class SplitOverlap(ZscrError):
    """Seen and unseen class sets intersect."""


class DanglingLabel(ZscrError):
    """An item references a class outside the declared split."""


class EmptyClass(ZscrError):
    """A declared class has no items."""


class UnknownClass(ZscrError):
    """The requested class id is not part of the dataset."""


class FormatError(ZscrError):
    """A serialized file is malformed (bad magic, truncation, bad counts)."""


class VersionMismatch(ZscrError):
    """A serialized file uses an unsupported format version."""


# --- training / evaluation ---


class ConfigInvalid(ZscrError):
    """Training configuration violates its invariants."""


class SingleClassDataset(ZscrError):
    """Wrong-class selection needs at least two seen classes."""


class EmptyDataset(ZscrError):
    """Batch sampling requires at least one seen-class item."""


class EmptyUnseenSplit(ZscrError):
    """Evaluation requires a non-empty unseen split."""


class EmptyQuerySet(ZscrError):
    """Aggregate metrics require at least one query."""


class ModelUntrained(ZscrError):
    """Model dimensions do not match the query/candidate embeddings."""


class DimsMismatch(ZscrError):
    """Checkpoint dimensions do not match the dataset."""
