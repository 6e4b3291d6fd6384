"""Exception types shared across the package.

Every error raised deliberately by this package derives from MVFusionError,
so callers (and the CLI) can distinguish data problems from programming
mistakes with a single except clause.
"""


class MVFusionError(Exception):
    """Base class for all errors raised by this package."""


class DimMismatch(MVFusionError):
    """Operands do not share the required grid shape or class count."""


class ZeroVariance(MVFusionError):
    """Normalization support is constant or too small to standardize."""


class ShrinkNotAllowed(MVFusionError):
    """Padding target is smaller than the volume along some axis."""


class InconsistentStack(MVFusionError):
    """Slice stack does not reassemble into the declared volume."""


class TooFewViews(MVFusionError):
    """Fusion method needs more input views than were given."""


class AllZeroWeights(MVFusionError):
    """Fusion weights must contain at least one positive entry."""


class EmptyStageList(MVFusionError):
    """Segmentation loss needs at least one stage output."""


class NonFiniteGradient(MVFusionError):
    """A computed gradient contains NaN or infinity."""


class NonFiniteLoss(MVFusionError):
    """A training loss evaluated to NaN or infinity."""


class IndivisibleInput(MVFusionError):
    """Input extent is not divisible by the network's downsampling factor."""


class UnalignableBatches(MVFusionError):
    """No final-batch adjustment can synchronize per-view step counts."""


class BadMagic(MVFusionError):
    """File does not start with the expected format signature."""


class UnsupportedDtype(MVFusionError):
    """File declares an element type this reader does not handle."""


class UnsupportedShape(MVFusionError):
    """File declares a dimensionality this reader does not handle."""


class TruncatedFile(MVFusionError):
    """File ends before the declared payload is complete."""


class LengthMismatch(MVFusionError):
    """Payload length disagrees with the header's dimensions."""


class InfeasibleSpec(MVFusionError):
    """Phantom description cannot be realized inside the requested grid."""
