"""Manifests, alignments, lexicons and watermark sidecars on disk."""

import csv
import json
import struct
from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from .edit_planner import AlignedWord, WordAlignment
from .errors import AlignmentError, ManifestError
from .logger import get_logger
from .phonemes import Lexicon
from .validation import validate_manifest_entry

logger = get_logger(__name__)

PathLike = Union[str, Path]

MIN_DURATION = 2.0
MAX_DURATION = 15.0

_WM_MAGIC = b"WMB1"


class ManifestEntry(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    id: str
    audio_path: str
    transcript: str
    alignment_path: Optional[str] = None
    duration: float

    def resolve(self, root: Path) -> "ManifestEntry":
        """Entry with paths made absolute against the manifest directory."""
        audio = str((root / self.audio_path).resolve())
        alignment = str((root / self.alignment_path).resolve()) if self.alignment_path else None
        return self.model_copy(update={"audio_path": audio, "alignment_path": alignment})


def load_manifest(path: PathLike, resolve_paths: bool = True) -> List[ManifestEntry]:
    path = Path(path)
    entries: List[ManifestEntry] = []
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"malformed JSON ({e.msg})", line=line_no) from e
            if not isinstance(data, dict):
                raise ManifestError("each line must be a JSON object", line=line_no)
            is_valid, message = validate_manifest_entry(data)
            if not is_valid:
                raise ManifestError(message, line=line_no)
            try:
                entry = ManifestEntry.model_validate(data)
            except ValidationError as e:
                raise ManifestError(str(e), line=line_no) from e
            entries.append(entry.resolve(path.parent) if resolve_paths else entry)
    return entries


def save_manifest(path: PathLike, entries: Iterable[ManifestEntry]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for entry in entries:
            f.write(json.dumps(entry.model_dump(), sort_keys=True) + "\n")
    return path


def filter_by_duration(entries: Iterable[ManifestEntry], min_seconds: float = MIN_DURATION,
                       max_seconds: float = MAX_DURATION) -> List[ManifestEntry]:
    kept = []
    for entry in entries:
        if min_seconds <= entry.duration <= max_seconds:
            kept.append(entry)
        else:
            logger.warning("Skipping %s: duration %.2fs outside [%s, %s]", entry.id, entry.duration,
                           min_seconds, max_seconds)
    return kept


def load_alignment(path: PathLike) -> WordAlignment:
    """JSON list of {word, start, end} in seconds, or CSV with header word,start,end."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".csv":
            with path.open("r", encoding="utf-8", newline="") as f:
                rows = list(csv.DictReader(f))
        else:
            rows = json.loads(path.read_text(encoding="utf-8"))
        words = [AlignedWord(str(r["word"]), float(r["start"]), float(r["end"])) for r in rows]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise AlignmentError(f"Could not read alignment {path}: {e}") from e
    return WordAlignment(tuple(words))


def save_alignment(path: PathLike, alignment: WordAlignment) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [{"word": w.word, "start": w.start, "end": w.end} for w in alignment.entries]
    path.write_text(json.dumps(rows, indent=2), encoding="utf-8")
    return path


def load_lexicon(path: PathLike) -> Lexicon:
    """Plain text, one ``word<TAB>sym sym sym`` per line."""
    entries = {}
    with Path(path).open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ManifestError("lexicon lines need word<TAB>symbols", line=line_no)
            word, symbols = line.split("\t", 1)
            entries[word.strip().lower()] = tuple(symbols.split())
    return Lexicon(entries)


def save_lexicon(path: PathLike, lexicon: Lexicon) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{word}\t{' '.join(symbols)}" for word, symbols in sorted(lexicon.entries.items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def save_watermark_bits(path: PathLike, bits: np.ndarray) -> Path:
    """Compact sidecar: magic, uint32 frame count, packed bits."""
    bits = np.asarray(bits, dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_WM_MAGIC + struct.pack("<I", bits.size) + np.packbits(bits).tobytes())
    return path


def load_watermark_bits(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _WM_MAGIC or len(raw) < 8:
        raise ManifestError(f"{path} is not a watermark sidecar")
    (count,) = struct.unpack("<I", raw[4:8])
    packed = np.frombuffer(raw[8:], dtype=np.uint8)
    if packed.size != (count + 7) // 8:
        raise ManifestError(f"{path} is truncated")
    return np.unpackbits(packed)[:count].astype(np.uint8)


def save_watermark_json(path: PathLike, bits: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([int(b) for b in np.asarray(bits)]), encoding="utf-8")
    return path


def load_watermark_json(path: PathLike) -> np.ndarray:
    return np.asarray(json.loads(Path(path).read_text(encoding="utf-8")), dtype=np.uint8)
