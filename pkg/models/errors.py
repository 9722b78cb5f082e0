class LsptmError(Exception):
    """Base class for every error raised by the toolkit."""


class ValidationError(LsptmError, ValueError):
    """Bad arguments, config or file content. The CLI exits with 2."""


class DimensionError(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


class ReportError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointBackboneError(CheckpointError):
    pass


class GradientError(LsptmError, RuntimeError):
    """Misuse of a gradient tape: non-scalar loss or a second backward pass."""


class FrameDecodeError(LsptmError, IOError):
    """A frame file is missing, malformed, or disagrees in resolution with its clip."""


class TrainingDivergedError(LsptmError, RuntimeError):
    pass
