"""Exception types shared across the package."""


class MGaussError(Exception):
    """Base class for every error raised by this library."""


class DegenerateQuaternion(MGaussError):
    """Quaternion norm is too small to define a rotation."""


class ScaleOverflow(MGaussError):
    """A log-scale parameter is outside the safe exponentiation range."""


class InconsistentGrid(MGaussError):
    """Partition grid was built for a different primitive set."""


class OutOfMemoryRequest(MGaussError):
    """Requested volume exceeds the configured voxel cap."""


class UninitializedField(MGaussError):
    """Residual field used before its weights were created."""


class ShapeMismatch(MGaussError):
    """Array arguments do not share the required shape."""


class SliceTooSmall(MGaussError):
    """Image side shorter than the structural-similarity window."""


class ShrinkNotAllowed(MGaussError):
    """Lattice resampling to a lower resolution was requested."""


class NonFiniteLoss(MGaussError):
    """Training loss became NaN or infinite."""


class GeometryMismatch(MGaussError):
    """Acquisition geometry is incompatible with the source volume."""


class EmptyForeground(MGaussError):
    """No voxel passed the foreground threshold."""


class ConstantInput(MGaussError):
    """Correlation is undefined for a constant-valued volume."""


class BadMagic(MGaussError):
    """File does not start with the expected magic bytes."""


class UnsupportedDatatype(MGaussError):
    """File uses a datatype code outside the supported subset."""


class TruncatedPayload(MGaussError):
    """File payload is shorter than its header promises."""


class EndianMismatch(MGaussError):
    """File is stored big-endian; only little-endian is supported."""


class ParseError(MGaussError):
    """Config document is not well formed."""

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"line {line}, column {column}: {message}"
        super().__init__(message)
        self.line = line
        self.column = column


class UnknownKey(MGaussError):
    """Config document contains a key that is not recognised."""


class OutOfRangeValue(MGaussError):
    """Config value violates its documented range."""
