"""Exception taxonomy shared by all engine modules."""


class MosaicError(Exception):
    """Base class for all engine errors."""


class DimensionError(MosaicError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(MosaicError, ValueError):
    """A documented precondition of an operation was violated."""


class DegenerateInputError(MosaicError, ValueError):
    """Input is numerically degenerate (e.g. a zero vector fed to a normalizer)."""


class FormatError(MosaicError, ValueError):
    """On-disk data does not conform to its declared format."""


class ArchiveFormatError(FormatError):
    """Embedding-archive manifest or blob fails a format check."""


class ArchiveIOError(MosaicError, OSError):
    """A declared archive file is missing or unreadable."""


class CheckpointFormatError(FormatError):
    """Model checkpoint is corrupt or does not match the target architecture."""


class VocabularyError(MosaicError, ValueError):
    """A token or property value is not part of the known vocabulary."""


class ConfigurationError(MosaicError, ValueError):
    """A configuration value or combination of values is invalid."""


class GenerationError(MosaicError, ValueError):
    """Synthetic data generation cannot proceed for the given object."""


class DataError(MosaicError, ValueError):
    """Required trial data is missing from the dataset."""


class EpisodeGenerationError(MosaicError, ValueError):
    """No valid fetch episode can be built for the requested level and fold."""


class TrainingDivergenceError(MosaicError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, message: str = ""):
        self.epoch = epoch
        self.batch = batch
        detail = message or "non-finite loss"
        super().__init__(f"{detail} at epoch {epoch}, batch {batch}")


class VisualizationError(MosaicError, ValueError):
    """Representation set cannot be reduced to two dimensions."""
