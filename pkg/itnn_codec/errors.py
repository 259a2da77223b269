"""Exception hierarchy for itnn-codec.

Every error carries the process exit code the CLI reports for it.
"""

from __future__ import annotations


class ItnnCodecError(Exception):
    """Base exception for itnn-codec errors."""

    exit_code = 1


class ConfigError(ItnnCodecError):
    """Invalid run configuration or command-line usage."""

    exit_code = 2


class FrameFormatError(ItnnCodecError):
    """Image file cannot be read as a luminance plane."""

    exit_code = 3


class PgmHeaderError(FrameFormatError):
    """Malformed PGM header."""


class UnsupportedMaxvalError(FrameFormatError):
    """PGM maxval other than 255."""


class TruncatedPayloadError(FrameFormatError):
    """PGM payload shorter than width x height."""


class GeometryError(ItnnCodecError):
    """A block, context or array does not fit the expected geometry."""

    exit_code = 4


class DimensionMismatchError(GeometryError):
    """Two operands have incompatible shapes."""


class BlockOutOfBoundsError(GeometryError):
    """Block lies (partly) outside the plane."""


class ContextOutOfFrameError(GeometryError):
    """Neural-network context crosses the top or left frame boundary."""


class InvalidModeError(GeometryError):
    """Intra mode index outside the classic range."""


class UnsupportedBlockSizeError(GeometryError):
    """Block size not served by the requested operation."""


class ModeNotRepresentableError(GeometryError):
    """Mode cannot be signalled with the current gate state."""


class BitstreamError(ItnnCodecError):
    """Bitstream cannot be decoded."""

    exit_code = 5


class TruncatedStreamError(BitstreamError):
    """Bitstream ended before the syntax was complete."""


class MalformedStreamError(BitstreamError):
    """Bitstream container or syntax is invalid."""


class ReconstructionMismatchError(BitstreamError):
    """Decoded reconstruction does not match the encoder's hash."""


class ModelFormatError(ItnnCodecError):
    """Model file is invalid."""

    exit_code = 6


class ShardFormatError(ModelFormatError):
    """Training-set shard file is invalid."""


class TrainingError(ItnnCodecError):
    """Training cannot proceed (empty batch or set)."""

    exit_code = 7


class PipelineError(ItnnCodecError):
    """A stage of the iterative training pipeline failed."""

    exit_code = 8

    def __init__(self, message: str, iteration: int | None = None) -> None:
        """Initialize the error.

        Args:
            message: Human readable description.
            iteration: Index of the failing training iteration, if known.
        """
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration


class CurveError(ItnnCodecError):
    """Rate curves cannot be compared."""

    exit_code = 9
