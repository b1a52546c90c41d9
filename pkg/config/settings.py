"""Pipeline configuration models and runtime settings."""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.utils.errors import ConfigError

DEFAULT_CONFIG_PATH = Path(__file__).parent / "default_pipeline.json"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class FramingConfig(_Strict):
    """Frame geometry: 256 samples / 64 hop is 32 ms / 8 ms at 8 kHz."""

    sample_rate: int = Field(8000, gt=0)
    frame_len: int = Field(256, ge=8)
    hop: int = Field(64, ge=1)

    @model_validator(mode="after")
    def _hop_fits(self) -> "FramingConfig":
        if self.hop > self.frame_len:
            raise ValueError("hop must not exceed frame_len")
        return self


class ConvLayerConfig(_Strict):
    filters: int = Field(..., ge=1)
    kernel: int = Field(3, ge=1)
    stride: int = Field(1, ge=1)
    pool_size: int = Field(2, ge=1)
    pool_stride: int = Field(2, ge=1)


def _default_layers() -> List[ConvLayerConfig]:
    return [ConvLayerConfig(filters=32 * 2 ** min(layer, 2)) for layer in range(6)]


class EncoderConfig(_Strict):
    """Six LayerNorm -> Conv1D -> ReLU -> MaxPool stages, then a linear projection."""

    input_len: int = Field(256, ge=8)
    layers: List[ConvLayerConfig] = Field(default_factory=_default_layers)
    embed_dim: int = Field(128, ge=1)
    ln_eps: float = Field(1e-5, gt=0)

    @model_validator(mode="after")
    def _length_survives(self) -> "EncoderConfig":
        if not self.layers:
            raise ValueError("encoder needs at least one layer")
        self.stage_lengths()
        return self

    def stage_lengths(self) -> List[int]:
        """Temporal length after each stage; raises if a stage empties the signal."""
        lengths = []
        length = self.input_len
        for index, layer in enumerate(self.layers):
            padding = (layer.kernel - 1) // 2
            length = (length + 2 * padding - layer.kernel) // layer.stride + 1
            length = (length - layer.pool_size) // layer.pool_stride + 1
            if length < 1:
                raise ValueError(f"layer {index} reduces the frame to zero length")
            lengths.append(length)
        return lengths

    @property
    def flat_dim(self) -> int:
        return self.stage_lengths()[-1] * self.layers[-1].filters


class PretrainConfig(_Strict):
    """Contrastive pretraining; batch/steps/cycle are not fixed by the method."""

    batch_n: int = Field(64, ge=4)
    steps: int = Field(200, ge=1)
    temperature: float = Field(0.5, gt=0)
    lr_min: float = Field(1e-4, gt=0)
    lr_max: float = Field(1e-1, gt=0)
    cycle_steps: int = Field(2000, ge=2)
    checkpoint_every: int = Field(50, ge=1)
    log_every: int = Field(10, ge=1)
    fine_tune_steps: int = Field(0, ge=0)
    eval_batches: int = Field(4, ge=1)
    dtype: Literal["float32", "float64"] = "float32"

    @field_validator("batch_n")
    @classmethod
    def _even(cls, value: int) -> int:
        if value % 2:
            raise ValueError("batch_n must be even")
        return value

    @model_validator(mode="after")
    def _lr_order(self) -> "PretrainConfig":
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        return self


class GraphConfig(_Strict):
    theta: float = Field(0.5, ge=-1.0, le=1.0)
    sweep: List[float] = Field(default_factory=lambda: [0.3, 0.5, 0.7])


class HeadConfig(_Strict):
    hidden: int = Field(512, ge=1)
    k_max: int = Field(16, ge=1)
    max_steps: int = Field(2000, ge=1)
    patience: int = Field(50, ge=1)
    tol: float = Field(1e-5, ge=0)
    lr: float = Field(1e-3, gt=0)
    schedule: Literal["constant", "cyclical"] = "constant"
    lr_min: float = Field(1e-4, gt=0)
    cycle_steps: int = Field(400, ge=2)
    collapse_weight: float = 1.0
    mode: Literal["per_mixture", "amortized"] = "per_mixture"
    kind: Literal["mlp", "gcn"] = "mlp"
    gcn_features: Literal["frames", "embeddings"] = "frames"
    amortized_epochs: int = Field(20, ge=1)
    min_frac: float = Field(0.02, ge=0, lt=1)
    merge_clusters: bool = True

    @model_validator(mode="after")
    def _widths(self) -> "HeadConfig":
        if self.hidden < self.k_max:
            raise ValueError("hidden width must be at least k_max")
        if self.collapse_weight != 1.0:
            raise ValueError("collapse_weight is fixed to 1")
        return self


class CorpusConfig(_Strict):
    n_speakers: int = Field(8, ge=2)
    utterances_per_speaker: int = Field(4, ge=1)
    utterance_s: float = Field(2.0, gt=0)
    n_train_mixtures: int = Field(0, ge=0)
    n_mixtures: int = Field(20, ge=1)
    sources_per_mixture: List[int] = Field(default_factory=lambda: [2])
    mixture_s: float = Field(4.0, gt=0)
    overlap_fraction: float = Field(0.25, ge=0, le=1)
    gain_db_range: Tuple[float, float] = (0.0, 5.0)

    @field_validator("sources_per_mixture")
    @classmethod
    def _source_counts(cls, value: List[int]) -> List[int]:
        if not value or any(not 2 <= count <= 5 for count in value):
            raise ValueError("each mixture needs between 2 and 5 sources")
        return value

    @model_validator(mode="after")
    def _enough_speakers(self) -> "CorpusConfig":
        if max(self.sources_per_mixture) > self.n_speakers:
            raise ValueError("more sources per mixture than speakers")
        if self.gain_db_range[0] > self.gain_db_range[1]:
            raise ValueError("gain_db_range must be ordered")
        return self


class TrendConfig(_Strict):
    n_mixtures: int = Field(5, ge=1)
    frame_lengths: List[int] = Field(default_factory=lambda: [128, 256, 512])
    sweep_pretrain_steps: int = Field(100, ge=1)


class PipelineConfig(_Strict):
    seed: int = 42
    framing: FramingConfig = Field(default_factory=FramingConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    graph: GraphConfig = Field(default_factory=GraphConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    trend: TrendConfig = Field(default_factory=TrendConfig)

    @model_validator(mode="after")
    def _frame_matches_encoder(self) -> "PipelineConfig":
        if self.encoder.input_len != self.framing.frame_len:
            raise ValueError("encoder.input_len must equal framing.frame_len")
        return self


class RuntimeSettings(BaseSettings):
    """Process-level knobs read from the environment or a .env file."""

    model_config = SettingsConfigDict(
        env_prefix="CONDEEPMOD_", env_file=".env", extra="ignore"
    )

    threads: int = Field(1, ge=1)
    log_level: str = "INFO"
    registry_url: Optional[str] = None


def _format_errors(error: ValidationError) -> List[Dict[str, Any]]:
    return [
        {"path": ".".join(str(part) for part in item["loc"]), "message": item["msg"]}
        for item in error.errors()
    ]


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply `dotted.key=value` overrides to a raw config document."""
    document = json.loads(json.dumps(document))
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"override '{override}' is not key=value", {"override": override})
        key, raw = override.split("=", 1)
        parts = [part for part in key.strip().split(".") if part]
        if not parts:
            raise ConfigError(f"override '{override}' has an empty key", {"override": override})
        node = document
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(
                    f"override path '{key}' descends into a scalar", {"path": key}
                )
            node = child
        node[parts[-1]] = _parse_value(raw)
    return document


def build_config(document: Dict[str, Any]) -> PipelineConfig:
    """Validate a raw document, reporting the dotted path of every offending key."""
    try:
        return PipelineConfig.model_validate(document)
    except ValidationError as error:
        errors = _format_errors(error)
        paths = ", ".join(item["path"] or "<root>" for item in errors)
        raise ConfigError(f"invalid pipeline config at: {paths}", {"errors": errors}) from error


def load_pipeline_config(
    path: Optional[Path] = None, overrides: Sequence[str] = ()
) -> PipelineConfig:
    """Load the JSON manifest (default one if no path) and apply overrides."""
    path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    try:
        document = json.loads(path.read_text())
    except FileNotFoundError as error:
        raise ConfigError(f"config file not found: {path}", {"path": str(path)}) from error
    except json.JSONDecodeError as error:
        raise ConfigError(f"config file is not valid JSON: {path}", {"path": str(path), "reason": str(error)}) from error
    if not isinstance(document, dict):
        raise ConfigError("config document must be a JSON object", {"path": str(path)})
    return build_config(apply_overrides(document, overrides))


def config_to_dict(config: PipelineConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json")


def config_hash(config: PipelineConfig) -> str:
    """Stable digest of the validated config, recorded with every registry row."""
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
