"""Exception types shared across the package."""


class TcpdmError(Exception):
    """Base class for all package errors."""


class InvalidSchedule(TcpdmError):
    pass


class ShapeMismatch(TcpdmError):
    pass


class StepOutOfRange(TcpdmError):
    pass


class EmptyBatch(TcpdmError):
    pass


class InvalidConfig(TcpdmError):
    pass


class OddDimension(TcpdmError):
    pass


class NonFiniteLoss(TcpdmError):
    pass


class PatchTooLarge(TcpdmError):
    pass


class OutOfBounds(TcpdmError):
    pass


class CoverageHole(TcpdmError):
    pass


class ImageTooSmall(TcpdmError):
    pass


class DegenerateConfiguration(TcpdmError):
    pass


class LengthMismatch(TcpdmError):
    pass


class BadMagic(TcpdmError):
    pass


class TruncatedPayload(TcpdmError):
    pass


class UnsupportedDtype(TcpdmError):
    pass


class ShapeOutOfFrame(TcpdmError):
    pass


class ChannelMismatch(TcpdmError):
    pass


class ConfigMismatch(TcpdmError):
    pass
