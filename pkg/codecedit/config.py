import json
import math
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .logger import get_logger

logger = get_logger(__name__)

CONFIG_FORMAT_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CodecConfig(_Section):
    """Residual-VQ codec shape. Defaults are the desk-scale preset."""

    sample_rate: int = 16000
    stride: int = 320
    ratios: Tuple[int, ...] = (2, 4, 4, 5, 2)
    num_codebooks: int = 4
    codebook_size: int = 256
    base_dim: int = 32
    latent_dim: int = 128
    commitment_weight: float = 0.25
    l1_weight: float = 1.0
    spectral_weight: float = 0.1
    si_snr_weight: float = 1.0
    ema_decay: float = 0.99
    dead_code_threshold: float = 0.05

    @model_validator(mode="after")
    def _check(self) -> "CodecConfig":
        if self.num_codebooks < 1:
            raise ValueError("num_codebooks must be >= 1")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if any(r < 2 for r in self.ratios):
            raise ValueError("every downsampling ratio must be >= 2")
        if math.prod(self.ratios) != self.stride:
            raise ValueError(f"stride {self.stride} != product of ratios {self.ratios}")
        if min(self.commitment_weight, self.l1_weight, self.spectral_weight, self.si_snr_weight) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.sample_rate % self.stride != 0:
            raise ValueError("sample_rate / stride must be an integer frame rate")
        return self

    @property
    def frame_rate(self) -> int:
        return self.sample_rate // self.stride

    @property
    def num_encoder_blocks(self) -> int:
        return len(self.ratios)

    @classmethod
    def full_scale(cls) -> "CodecConfig":
        return cls(codebook_size=2048, base_dim=64, latent_dim=128)


class ARConfig(_Section):
    num_layers: int = 2
    hidden_size: int = 128
    num_heads: int = 2
    num_codebooks: int = 4
    codebook_size: int = 256
    max_spans: int = 3
    phoneme_vocab_size: int = 64
    max_seq_len: int = 2048
    head_layers: int = 2
    dropout: float = 0.0
    codebook_weights: Tuple[float, ...] = (5.0, 1.0, 0.5, 0.1)

    @model_validator(mode="after")
    def _check(self) -> "ARConfig":
        if self.hidden_size % self.num_heads != 0:
            raise ValueError("hidden_size must be divisible by num_heads")
        if len(self.codebook_weights) != self.num_codebooks:
            raise ValueError("codebook_weights needs one entry per codebook")
        if self.max_spans < 1:
            raise ValueError("max_spans must be >= 1")
        if self.head_layers < 1:
            raise ValueError("head_layers must be >= 1")
        return self

    @property
    def token_vocab_size(self) -> int:
        # codes + sos/eos/eog + one mask marker per span + delay pad
        return self.codebook_size + 3 + self.max_spans + 1

    @classmethod
    def full_scale(cls) -> "ARConfig":
        # 2048 hidden does not split over 12 heads; 2040 is the closest that does.
        return cls(num_layers=16, hidden_size=2040, num_heads=12, codebook_size=2048)


class EditParams(_Section):
    alpha: float = 0.12
    frame_rate: int = 50
    max_spans: int = 3

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, v: float) -> float:
        if v < 0:
            raise ValueError("alpha must be >= 0")
        return v


class CFGParams(_Section):
    gamma: float = 1.5


class SamplerParams(_Section):
    top_p: float = 0.8
    temperature: float = 1.0
    max_span_frames: Optional[int] = None
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "SamplerParams":
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.max_span_frames is not None and self.max_span_frames < 1:
            raise ValueError("max_span_frames must be >= 1")
        return self


class TrainHyper(_Section):
    steps: int = 200
    batch_size: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    warmup_steps: int = 10
    grad_clip: float = 1.0
    segment_frames: int = 50
    log_every: int = 25
    seed: int = 0


def codec_hyper() -> TrainHyper:
    return TrainHyper()


def wm_hyper() -> TrainHyper:
    return TrainHyper(steps=1500, learning_rate=5e-4)


def ar_hyper() -> TrainHyper:
    return TrainHyper(steps=2000, batch_size=8, learning_rate=1e-3, weight_decay=0.01,
                      warmup_steps=100, segment_frames=0, log_every=100)


class SynthSpec(_Section):
    alphabet: str = "aeioubdkmnst"
    num_words: int = 24
    num_utterances: int = 24
    min_word_symbols: int = 2
    max_word_symbols: int = 4
    symbol_seconds: Tuple[float, float] = (0.08, 0.14)
    gap_seconds: Tuple[float, float] = (0.04, 0.12)
    min_duration: float = 2.0
    max_duration: float = 4.0
    sample_rate: int = 16000
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "SynthSpec":
        if len(set(self.alphabet)) != len(self.alphabet) or not self.alphabet:
            raise ValueError("alphabet must hold distinct symbols")
        if not 2.0 <= self.min_duration <= self.max_duration <= 15.0:
            raise ValueError("durations must satisfy 2 <= min <= max <= 15 seconds")
        if self.min_word_symbols < 1 or self.max_word_symbols < self.min_word_symbols:
            raise ValueError("invalid word length range")
        return self


class RunConfig(_Section):
    seed: int = 0
    codec: CodecConfig = Field(default_factory=CodecConfig)
    ar: ARConfig = Field(default_factory=ARConfig)
    edit: EditParams = Field(default_factory=EditParams)
    cfg: CFGParams = Field(default_factory=CFGParams)
    sampler: SamplerParams = Field(default_factory=SamplerParams)
    codec_train: TrainHyper = Field(default_factory=codec_hyper)
    wm_train: TrainHyper = Field(default_factory=wm_hyper)
    ar_train: TrainHyper = Field(default_factory=ar_hyper)
    synth: SynthSpec = Field(default_factory=SynthSpec)

    @model_validator(mode="after")
    def _consistent(self) -> "RunConfig":
        if self.ar.num_codebooks != self.codec.num_codebooks:
            raise ValueError("ar.num_codebooks must equal codec.num_codebooks")
        if self.ar.codebook_size != self.codec.codebook_size:
            raise ValueError("ar.codebook_size must equal codec.codebook_size")
        if self.edit.frame_rate != self.codec.frame_rate:
            raise ValueError("edit.frame_rate must equal the codec frame rate")
        return self

    def snapshot(self) -> Dict[str, Any]:
        return {"format_version": CONFIG_FORMAT_VERSION, **self.model_dump(mode="json")}


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply dotted ``key=value`` overrides onto a nested config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override must look like key=value: {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"Unknown config key: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"Unknown config key: {key}")
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Effective config: defaults < JSON file < command-line overrides."""
    data = RunConfig().model_dump(mode="json")
    if path:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Could not read config file {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError("Config file must hold a JSON object")
        version = loaded.pop("format_version", CONFIG_FORMAT_VERSION)
        if version != CONFIG_FORMAT_VERSION:
            raise ConfigError(f"Unsupported config format_version {version}")
        data = _deep_merge(data, loaded)
    data = apply_overrides(data, overrides)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = _deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def validate_config(config: RunConfig) -> None:
    logger.info("Configuration validated successfully")
    logger.info("  - Codec: K=%s V=%s stride=%s (%s Hz frames)",
                config.codec.num_codebooks, config.codec.codebook_size,
                config.codec.stride, config.codec.frame_rate)
    logger.info("  - AR: layers=%s hidden=%s heads=%s", config.ar.num_layers,
                config.ar.hidden_size, config.ar.num_heads)
    logger.info("  - Edit: alpha=%ss max_spans=%s", config.edit.alpha, config.edit.max_spans)
    logger.info("  - Sampling: top_p=%s temperature=%s gamma=%s", config.sampler.top_p,
                config.sampler.temperature, config.cfg.gamma)
    logger.info("  - Seed: %s", config.seed)
