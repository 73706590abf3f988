"""Exception hierarchy shared by every seqnav module."""


class SeqNavError(Exception):
    """Base class for all seqnav errors."""


class DimensionMismatch(SeqNavError, ValueError):
    pass


class ShapeMismatch(SeqNavError, ValueError):
    pass


class LengthMismatch(SeqNavError, ValueError):
    pass


class CoincidentFixes(SeqNavError):
    """Two GNSS fixes are too close to define a bearing; hold the previous one."""


class NonPositiveInterval(SeqNavError, ValueError):
    pass


class ClassOutOfRange(SeqNavError, ValueError):
    pass


class AlphaOutOfRange(SeqNavError, ValueError):
    pass


class DegenerateAim(SeqNavError):
    """Aim point sits at the robot origin, so the heading reference is undefined."""


class AllZeroGradients(SeqNavError):
    """Every task gradient norm is zero; task weights are left unchanged."""


class NonFiniteLoss(SeqNavError, FloatingPointError):
    pass


class EmptySplit(SeqNavError, ValueError):
    pass


class NoValidPixels(SeqNavError, ValueError):
    pass


class RouteTooShort(SeqNavError, ValueError):
    pass


class InvalidSpec(SeqNavError, ValueError):
    pass


class BadMagic(SeqNavError, ValueError):
    pass


class UnsupportedVersion(SeqNavError, ValueError):
    pass


class TruncatedPayload(SeqNavError, ValueError):
    pass


class ConfigMismatch(SeqNavError, ValueError):
    pass


class BadLog(SeqNavError, ValueError):
    pass
