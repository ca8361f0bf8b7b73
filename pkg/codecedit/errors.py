"""Exception hierarchy shared by every pipeline stage."""

from typing import Dict, Optional


class CodecEditError(Exception):
    """Base class for all errors raised by codecedit."""


class ConfigError(CodecEditError, ValueError):
    pass


class AudioFormatError(CodecEditError, ValueError):
    pass


class ShapeMismatchError(CodecEditError, ValueError):
    pass


class SpanError(CodecEditError, ValueError):
    pass


class LayoutError(CodecEditError, ValueError):
    pass


class VocabularyError(CodecEditError, ValueError):
    pass


class AlignmentError(CodecEditError, ValueError):
    pass


class CheckpointError(CodecEditError, ValueError):
    pass


class NumericalError(CodecEditError, ValueError):
    pass


class GenerationError(CodecEditError, ValueError):
    pass


class ManifestError(CodecEditError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingError(CodecEditError, RuntimeError):
    def __init__(self, message: str, step: Optional[int] = None, components: Optional[Dict[str, float]] = None):
        self.step = step
        self.components = dict(components or {})
        if step is not None:
            message = f"step {step}: {message}"
        if self.components:
            detail = ", ".join(f"{k}={v:.6g}" for k, v in self.components.items())
            message = f"{message} ({detail})"
        super().__init__(message)
