"""Exception types shared across the package."""


class SkelFuseError(Exception):
    """Base class for all package errors."""


class ParseError(SkelFuseError):
    """Malformed mesh file."""


class TopologyError(SkelFuseError):
    """Face index out of range, degenerate face, or similar connectivity defect."""


class ArgumentError(SkelFuseError, ValueError):
    """Invalid argument value."""


class LengthMismatch(SkelFuseError, ValueError):
    """Per-element attribute does not match element count."""


class SolveError(SkelFuseError):
    """Linear system was singular or produced non-finite values."""


class NotConnected(SkelFuseError):
    """Operation requires a connected mesh or graph."""


class ShapeError(SkelFuseError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class NotScalar(ShapeError):
    """backward() requires a scalar loss tensor."""


class MissingGrad(SkelFuseError):
    """Optimizer step requested but a parameter has no gradient."""


class MissingAssignment(SkelFuseError):
    """Unpool requested without a pooling assignment."""


class EmptyCorrespondence(SkelFuseError):
    """Contrastive loss requires at least one positive pair."""


class DimensionMismatch(SkelFuseError, ValueError):
    """Buffers, meshes, or label arrays disagree on size."""
