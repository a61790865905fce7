"""Exception hierarchy shared by every module."""


class LMCError(Exception):
    pass


class LayoutError(LMCError, ValueError):
    pass


class ConfigError(LMCError, ValueError):
    pass


class NumericError(LMCError, ArithmeticError):
    """Non-finite value hit during evaluation.

    ``index`` is the offending example (or ``None`` when not example-bound),
    ``alpha`` the interpolation coefficient when raised from a barrier scan.
    """

    def __init__(self, message, index=None, alpha=None):
        super().__init__(message)
        self.index = index
        self.alpha = alpha


class UnsupportedMetricError(LMCError, ValueError):
    pass


class DivergenceError(NumericError):
    def __init__(self, message, epoch, batch):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class ParseError(LMCError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BoundsError(LMCError, IndexError):
    pass


class CheckpointError(LMCError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class EmptyOutputError(LMCError, ValueError):
    pass


class PartialRunError(LMCError, RuntimeError):
    pass
