from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import soundfile as sf

from .errors import AudioFormatError
from .logger import get_logger

logger = get_logger(__name__)

PEAK_TARGET = 0.95


@dataclass(frozen=True)
class Waveform:
    """Mono waveform, nominal range [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise AudioFormatError(f"Waveform must be single channel, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise AudioFormatError("Waveform holds non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def num_frames(self, stride: int) -> int:
        return len(self) // stride


def peak_normalize(w: Waveform, peak: float = PEAK_TARGET) -> Waveform:
    top = float(np.max(np.abs(w.samples))) if len(w) else 0.0
    if top == 0.0:
        return w
    return Waveform(w.samples * (peak / top), w.sample_rate)


def read_wav(path: Union[str, Path], expected_rate: int) -> Waveform:
    """Read a 16-bit PCM mono WAV at ``expected_rate``."""
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise AudioFormatError(f"Unreadable audio file {path}: {e}") from e
    if info.format != "WAV" or info.subtype != "PCM_16":
        raise AudioFormatError(f"Unsupported audio encoding {info.format}/{info.subtype} in {path}; "
                               "expected 16-bit PCM WAV")
    if info.channels != 1:
        raise AudioFormatError(f"Unsupported channel count {info.channels} in {path}; expected mono")
    if info.samplerate != expected_rate:
        raise AudioFormatError(f"Sample rate {info.samplerate} in {path} does not match {expected_rate}")
    samples, rate = sf.read(str(path), dtype="float32", always_2d=False)
    return Waveform(samples, rate)


def write_wav(path: Union[str, Path], w: Waveform) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    clipped = np.clip(w.samples, -1.0, 1.0)
    if np.any(clipped != w.samples):
        logger.warning("Clipping %s samples while writing %s", int(np.sum(clipped != w.samples)), path)
    sf.write(str(path), clipped, w.sample_rate, subtype="PCM_16", format="WAV")
    return path
