import math
from typing import Any, Dict, Sequence, Tuple

import numpy as np


def validate_span_pairs(pairs: Sequence[Tuple[int, int]], num_frames: int) -> Tuple[bool, str]:
    """Check sorted, in-range, disjoint and non-adjacent inclusive frame spans.

    Returns:
        Tuple of (is_valid, message).
    """
    prev_end = None
    for start, end in pairs:
        if start > end:
            return False, f"Span ({start}, {end}) has start after end"
        if start < 0 or end >= num_frames:
            return False, f"Span ({start}, {end}) exceeds frame count {num_frames}"
        if prev_end is not None and start <= prev_end + 1:
            return False, f"Span ({start}, {end}) overlaps or touches the previous span"
        prev_end = end
    return True, "Valid"


def validate_waveform(samples: np.ndarray, sample_rate: int, expected_rate: int) -> Tuple[bool, str]:
    if samples.ndim != 1:
        return False, f"Waveform must be single channel, got shape {samples.shape}"
    if sample_rate != expected_rate:
        return False, f"Sample rate {sample_rate} does not match configured {expected_rate}"
    if not np.all(np.isfinite(samples)):
        return False, "Waveform holds non-finite samples"
    return True, "Valid"


def validate_alignment(entries: Sequence[Tuple[str, float, float]]) -> Tuple[bool, str]:
    prev_end = -math.inf
    for i, (word, start, end) in enumerate(entries):
        if not word:
            return False, f"Alignment entry {i} has an empty word"
        if not start < end:
            return False, f"Alignment entry {i} ({word}) needs start < end"
        if start < prev_end - 1e-9:
            return False, f"Alignment entry {i} ({word}) overlaps the previous word"
        prev_end = end
    return True, "Valid"


def validate_manifest_entry(data: Dict[str, Any]) -> Tuple[bool, str]:
    required_fields = ["id", "audio_path", "transcript", "duration"]

    for field in required_fields:
        if field not in data:
            return False, f"Missing required field: {field}"

    if not isinstance(data.get("duration"), (int, float)) or data["duration"] <= 0:
        return False, "Invalid duration"

    if not str(data.get("transcript", "")).strip():
        return False, "Empty transcript"

    return True, "Valid"
