"""Exception types shared across the package."""


class PortraitStyleError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(PortraitStyleError, ValueError):
    """Operands have incompatible shapes."""


class ChannelMismatchError(ShapeMismatchError):
    """Feature tensors disagree on channel count."""


class LayerMismatchError(PortraitStyleError, ValueError):
    """Two feature sets do not share the required layer names."""


class UnknownLayerError(PortraitStyleError, KeyError):
    """A requested layer name is not exposed by the backbone."""


class UnsupportedFormatError(PortraitStyleError, ValueError):
    """Image file format outside PNG/JPEG."""


class ImageTooSmallError(PortraitStyleError, ValueError):
    """The operation needs a larger spatial extent than the input has."""


class WrongCropSizeError(PortraitStyleError, ValueError):
    """A face crop does not match the size the model expects."""


class EmptyCropsError(PortraitStyleError, ValueError):
    """Feature concatenation was asked to run on zero crops."""


class NoFacesError(PortraitStyleError, ValueError):
    """An operation requiring at least one face box received none."""


class MissingWeightsError(PortraitStyleError, RuntimeError):
    """A pretrained weight artifact is absent and could not be fetched."""


class ChecksumMismatchError(PortraitStyleError, RuntimeError):
    """A weight artifact on disk does not match its pinned checksum."""


class UnsupportedKindError(PortraitStyleError, ValueError):
    """Unknown backbone kind passed to the loader."""


class NonFiniteLossError(PortraitStyleError, RuntimeError):
    """The objective became NaN/inf during optimization.

    Carries the stage resolution and the step index at which the
    divergence was detected.
    """

    def __init__(self, resolution: int, step: int, value: float):
        self.resolution = resolution
        self.step = step
        self.value = value
        super().__init__(
            f"non-finite loss ({value!r}) at step {step} of the "
            f"{resolution}px stage"
        )
