"""Exception hierarchy shared by every lionlora module."""


class LionError(Exception):
    """Base class for all errors raised by lionlora."""


class DimensionError(LionError, ValueError):
    """Shapes are incompatible for the requested operation."""


class DTypeError(LionError, TypeError):
    pass


class DomainError(LionError, ValueError):
    """An input lies outside the domain where the result is defined."""


class UndefinedSimilarityError(DomainError):
    pass


class UndefinedCorrelationError(DomainError):
    pass


class UndefinedCentroidError(DomainError):
    pass


class PropagationError(LionError, FloatingPointError):
    """NaN reached an operation that refuses to propagate it."""


class ContractError(LionError, RuntimeError):
    pass


class ConfigError(LionError, ValueError):
    pass


class RangeError(ConfigError):
    """A scaling value or sampled range is outside its admissible interval."""


class AttachmentError(LionError, KeyError):
    """An adapter references attachment points the model does not have."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class FusionError(LionError, ValueError):
    pass


class DegenerateAdapterError(FusionError):
    """An adapter has a zero-norm delta where normalisation needs a direction."""


class EmptyFusionError(FusionError):
    pass


class TrainingFailureError(LionError, RuntimeError):
    pass


class WeightFileError(LionError, ValueError):
    """Base class for weight-file parse failures."""


class MagicError(WeightFileError):
    pass


class VersionError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class ChecksumError(WeightFileError):
    pass
