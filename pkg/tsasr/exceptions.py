from typing import Optional, Sequence


class TsasrError(Exception):
    """Base class for every error raised by tsasr."""


class DimensionError(TsasrError):
    """Raised when tensor shapes or frame counts do not line up."""

    def __init__(self, what: str, expected: object, actual: object):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class GradientCheckError(TsasrError):
    """Raised when a finite-difference check cannot be evaluated"""

    def __init__(self, detail: str):
        super().__init__(f"Gradient check failed: {detail}")


class RttmParseError(TsasrError):
    """Raised when an RTTM line cannot be parsed"""

    def __init__(self, line_number: int, detail: str):
        self.line_number = line_number
        super().__init__(f"RTTM line {line_number}: {detail}")


class EmptyInputError(TsasrError):
    """Raised when an operation receives nothing to work with"""

    def __init__(self, detail: str):
        super().__init__(detail)


class CapacityError(TsasrError):
    """Raised when a sequence exceeds a fixed model capacity"""

    def __init__(self, what: str, length: int, capacity: int):
        self.length = length
        self.capacity = capacity
        super().__init__(f"{what} of length {length} exceeds capacity {capacity}")


class InfeasibleLabelError(TsasrError):
    """Raised when a CTC label cannot be aligned to the available frames"""

    def __init__(self, label_length: int, required_frames: int, frames: int):
        self.label_length = label_length
        self.required_frames = required_frames
        self.frames = frames
        super().__init__(
            f"Label of length {label_length} needs {required_frames} frames, only {frames} available"
        )


class CtcStateError(TsasrError):
    """Raised when a CTC prefix state does not belong to the scored prefix"""

    def __init__(self, state_labels: int, prefix_labels: int):
        super().__init__(
            f"CTC prefix state covers {state_labels} labels but prefix has {prefix_labels}"
        )


class ConfigError(TsasrError):
    """Raised for invalid or unknown configuration keys"""

    def __init__(self, key: str, detail: str = "invalid value"):
        self.key = key
        super().__init__(f"Config key '{key}': {detail}")


class TrainingDivergedError(TsasrError):
    """Raised when the training loss becomes non-finite"""

    def __init__(self, step: int, checkpoint: Optional[str] = None):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(
            f"Non-finite loss at step {step}; last good checkpoint: {checkpoint or 'none'}"
        )


class CheckpointError(TsasrError):
    """Raised when a tensor file has an unknown format or version"""

    def __init__(self, path: str, detail: str):
        self.path = path
        super().__init__(f"{path}: {detail}")


class UnknownSpeakerError(TsasrError, KeyError):
    """Raised when a speaker label is not present in a recording"""

    def __init__(self, speaker: str, known: Sequence[str] = ()):
        self.speaker = speaker
        super().__init__(f"Unknown speaker '{speaker}' (known: {', '.join(known)})")

    def __str__(self) -> str:
        return str(self.args[0])


class DecodeWindowError(TsasrError):
    """Raised when a single decoding window fails"""

    def __init__(self, window_index: int, detail: str):
        self.window_index = window_index
        super().__init__(f"Window {window_index}: {detail}")


class MissingWordTimesError(TsasrError):
    """Raised by time-constrained metrics when word times are absent"""

    def __init__(self, speaker: str):
        self.speaker = speaker
        super().__init__(
            f"Segment of speaker '{speaker}' has no word times and interpolation is disabled"
        )
