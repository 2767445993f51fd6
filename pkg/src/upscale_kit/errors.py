"""Exception hierarchy shared by every module in the package.

The CLI maps these onto exit codes: usage problems are handled by argparse
itself, anything deriving from :class:`UpscaleError` is a validation failure
(exit 2), and :class:`TrainingDiverged` plus unexpected exceptions are
runtime errors (exit 3).
"""


class UpscaleError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(UpscaleError):
    """Tensor shapes do not satisfy an operation's contract."""


class ParameterError(UpscaleError):
    """A parameter value is outside its allowed range."""


class ContractError(UpscaleError):
    """A precondition on the inputs of an operation was violated."""


class ValidationError(UpscaleError):
    """A configuration or plan fails its invariants."""


class ContextError(UpscaleError):
    """A sequence exceeds the model's context length."""


class TokenIdError(UpscaleError):
    """A token id is out of range for the tokenizer or model."""


class ContainerError(UpscaleError):
    """Base class for checkpoint-container format errors."""


class HeaderError(ContainerError):
    """Missing magic, unreadable header length, or malformed header JSON."""


class TruncationError(ContainerError):
    """Payload is shorter than the header-declared extents."""


class OverlapError(ContainerError):
    """Header declares overlapping, unordered, or gapped tensor ranges."""


class TrainingDiverged(UpscaleError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, checkpoint: str | None = None):
        self.step = step
        self.checkpoint = checkpoint
        msg = f"non-finite loss at step {step}"
        if checkpoint:
            msg += f" (last good weights kept at {checkpoint})"
        super().__init__(msg)
