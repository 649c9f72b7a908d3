"""Exception taxonomy shared across the package."""


class AdvColorError(Exception):
    """Base class for all library errors."""


class ShapeError(AdvColorError):
    """Array shapes incompatible with the requested operation."""


class DomainError(AdvColorError):
    """Input values outside the operation's valid domain."""


class ContractError(AdvColorError):
    """An API contract was violated (e.g. non-scalar loss passed to grad)."""


class NonFiniteError(AdvColorError):
    """A NaN or Inf appeared where only finite values are allowed."""


class TrainingError(AdvColorError):
    """Classifier training diverged."""


class CheckpointError(AdvColorError):
    """Model checkpoint file is missing pieces or cannot be parsed."""


class TransformError(AdvColorError):
    """An image transform (e.g. JPEG codec) failed."""


class ConfigError(AdvColorError):
    """Run configuration or dataset manifest is invalid."""
