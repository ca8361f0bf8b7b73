"""
Checkpoint directories: ``config.json`` (versioned) + ``weights.pt`` + SHA-256 of the weights.
"""

import hashlib
import io
import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar, Union

import torch
import torch.nn as nn
from pydantic import BaseModel, ValidationError

from .errors import CheckpointError
from .logger import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
CONFIG_FILE = "config.json"
WEIGHTS_FILE = "weights.pt"

C = TypeVar("C", bound=BaseModel)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def module_hash(*modules: nn.Module) -> str:
    """Digest of the modules' state (parameters and buffers) in key order."""
    digest = hashlib.sha256()
    for module in modules:
        for key, tensor in sorted(module.state_dict().items()):
            digest.update(key.encode("utf-8"))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(directory: Union[str, Path], kind: str, config: BaseModel, module: nn.Module,
                    version: str, extra: Optional[Dict[str, Any]] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    torch.save(module.state_dict(), buffer)
    blob = buffer.getvalue()
    (directory / WEIGHTS_FILE).write_bytes(blob)
    document = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "version": version,
        "config": config.model_dump(mode="json"),
        "weights_sha256": _sha256(blob),
        "extra": extra or {},
    }
    (directory / CONFIG_FILE).write_text(json.dumps(document, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Saved %s checkpoint to %s", kind, directory)
    return directory


def load_checkpoint(directory: Union[str, Path], kind: str, config_cls: Type[C],
                    version: str) -> Tuple[C, Dict[str, torch.Tensor], Dict[str, Any]]:
    """Validate and read a checkpoint; returns (config, state_dict, extra)."""
    directory = Path(directory)
    try:
        document = json.loads((directory / CONFIG_FILE).read_text(encoding="utf-8"))
        blob = (directory / WEIGHTS_FILE).read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Unreadable checkpoint at {directory}: {e}") from e

    if document.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"Checkpoint format {document.get('format_version')} is not supported")
    if document.get("kind") != kind:
        raise CheckpointError(f"Expected a {kind} checkpoint, found {document.get('kind')}")
    if document.get("version") != version:
        raise CheckpointError(f"Checkpoint version {document.get('version')} does not match {version}")
    if document.get("weights_sha256") != _sha256(blob):
        raise CheckpointError(f"Weights hash mismatch in {directory}; refusing to load")
    try:
        config = config_cls.model_validate(document["config"])
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"Invalid config in {directory}: {e}") from e
    state = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
    return config, state, document.get("extra", {})
