"""Exception types shared across the package."""


class StecError(Exception):
    """Base class for all codec errors."""


class MediaFormatError(StecError):
    """Unreadable or malformed image/video input."""


class ModelFormatError(StecError):
    """Malformed or incompatible model file."""


class ContainerFormatError(StecError):
    """Malformed, truncated or corrupted bitstream container."""


class RangeCoderError(ContainerFormatError):
    """Range coder detected an invalid state while decoding."""


class DegenerateInputError(StecError):
    """Statistic undefined for the given input (e.g. zero variance)."""


class TrainingDiverged(StecError):
    """Loss became non-finite; carries the last good checkpoint."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
