"""Exception hierarchy shared by all cosoc modules."""


class CosocError(Exception):
    """Base class for all errors raised by this package."""


class ZeroVector(CosocError):
    """A vector with (near-)zero L2 norm was passed where a direction is required."""


class NonFinite(CosocError):
    """A vector contains NaN or infinite entries."""


class DimMismatch(CosocError):
    """Operands have incompatible dimensions."""


class SchemaError(CosocError):
    """A manifest or config file violates its schema (bad field, duplicate id, ...)."""


class CorruptPayload(CosocError):
    """The binary feature payload does not match the manifest (size or content)."""


class InvalidRect(CosocError):
    """Crop rectangle coordinates violate the unit-square invariants."""


class InfeasibleConstraint(CosocError):
    """No crop rectangle can satisfy the requested area/aspect constraints."""


class EmptyInput(CosocError):
    """An aggregate was requested over an empty collection."""


class TooFewPoints(CosocError):
    """Fewer points than clusters were given to the clustering step."""


class InsufficientData(CosocError):
    """The store does not contain enough classes/images/crops for the request."""


class KTooSmall(CosocError):
    """Shared-prototype search needs at least two support images."""


class EnumerationCapExceeded(CosocError):
    """The exact assignment search would enumerate more than the configured cap."""


class RaggedCrops(CosocError):
    """Support images carry different crop counts where equal counts are required."""


class CountMismatch(CosocError):
    """Query crop count differs from the prototype count."""


class TooFewValues(CosocError):
    """A statistic needs more values than were provided."""


class ConfigInvalid(CosocError):
    """A synthetic-world or run configuration violates its invariants."""


class MissingGroundTruth(CosocError):
    """A training regime needs per-crop foreground roles the store does not carry."""
