"""planediff runtime Python `Exception`s."""

from __future__ import annotations


class PlaneDiffException(Exception):
    """Base class for planediff exceptions."""


class ValidationFailure(PlaneDiffException, ValueError):
    """A spec, record or configuration violates its declared invariants."""


class ShapeMismatch(PlaneDiffException, ValueError):
    """A tensor does not have the shape an operation requires."""


class NumericError(PlaneDiffException, ArithmeticError):
    """A tensor contains NaN or Inf where finite values are required."""


class DivergedLoss(NumericError):
    """The training loss became non-finite."""

    def __init__(self, step: int, lr: float, loss: float) -> None:
        super().__init__(f"loss is {loss} at step {step} (lr={lr:g})")
        self.step = step
        self.lr = lr
        self.loss = loss


class ConfigurationError(PlaneDiffException, ValueError):
    """The requested configuration cannot be built."""


class CodecError(PlaneDiffException):
    """An error occurred while decoding a tensor file."""


class BadChecksum(CodecError):
    """The CRC of the tensor payload does not match its sidecar."""


class BadSidecar(CodecError):
    """The JSON sidecar does not describe the payload."""


class ManifestError(PlaneDiffException):
    """A manifest could not be loaded."""


class DigestMismatch(ManifestError):
    """The stored digest does not match the manifest content."""


class MissingUpstreamArtifact(ManifestError):
    """A stage was run before the stage it depends on."""

    def __init__(self, required: str) -> None:
        super().__init__(f"missing upstream artifact: {required}")
        self.required = required


class LeakageError(PlaneDiffException):
    """Data crossed a split boundary."""


class TestSplitSealed(LeakageError):
    """The test split was read before the evaluate stage."""

    __test__ = False  # not a pytest class


class FreezeViolation(PlaneDiffException):
    """Parameters that must stay frozen were changed."""


class RunLocked(PlaneDiffException):
    """Another run holds the output directory."""
