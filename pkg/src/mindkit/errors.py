"""Exception types shared across mindkit."""


class MindkitError(Exception):
    pass


class ShapeMismatch(MindkitError, ValueError):
    pass


class NonFinite(MindkitError, FloatingPointError):
    pass


class NotScalarLoss(MindkitError, ValueError):
    pass


class MissingGradient(MindkitError, KeyError):
    pass


class BadRange(MindkitError, ValueError):
    pass


class StepOutOfRange(MindkitError, ValueError):
    pass


class EmptyDataset(MindkitError, ValueError):
    pass


class BatchTooSmall(MindkitError, ValueError):
    pass


class BadResolution(MindkitError, ValueError):
    pass


class OutOfRange(MindkitError, ValueError):
    pass


class UnknownToken(MindkitError, KeyError):
    pass


class TooLong(MindkitError, ValueError):
    pass


class StaleFeatureCache(MindkitError, RuntimeError):
    pass


class IOFailure(MindkitError, OSError):
    pass


class SingularSystem(MindkitError, ArithmeticError):
    pass


class DimensionMismatch(MindkitError, ValueError):
    pass


class TooFewSamples(MindkitError, ValueError):
    pass


class BadFraction(MindkitError, ValueError):
    pass


class TapMismatch(MindkitError, ValueError):
    pass


class NonFiniteLoss(MindkitError, FloatingPointError):
    pass


class ModelMissing(MindkitError, FileNotFoundError):
    pass


class DecoderMissing(MindkitError, FileNotFoundError):
    pass


class UpstreamMissing(MindkitError, FileNotFoundError):
    """An artifact produced by an earlier pipeline stage is absent or stale."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        msg = f"missing upstream artifact from stage '{stage}'"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class EmptyAfterFilter(MindkitError, RuntimeError):
    pass
