"""
Configuration loader for botgraph.

This module provides YAML configuration loading and validation using Pydantic
for the three flat documents the pipeline reads:

- RunConfig: every tunable of a pipeline run (sampling, models, ablations);
- SynthConfig: parameters of the synthetic graph generator;
- DatasetManifest: the files and sizes of a prepared dataset directory.

Unknown keys are rejected everywhere, and the resolved document of a run is
written next to its artifacts.
"""

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Type, TypeVar, cast

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from lib.utils import atomic_write_bytes

BLOCK_NAMES = ("description", "tweet", "num_meta", "cat_meta", "category", "temporal")
PRECOMPUTED_BLOCKS = ("description", "tweet", "num_meta", "cat_meta")

# delta at which generated bot behaviour becomes fully distinct
BEHAVIOR_GAP_SCALE = 20.0

ModelT = TypeVar("ModelT", bound=BaseModel)


class ConfigError(Exception):
    """
    Exception raised for configuration-related errors.

    Used for missing files, unparsable YAML, unknown keys and out-of-range
    values that should fail fast.
    """


class RunConfig(BaseModel):
    """
    All tunables of a pipeline run, as one flat document.

    ``lambda`` is spelled as in the YAML document; the attribute is ``lam``.
    """

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    # Inputs and outputs
    data_dir: Optional[Path] = Field(
        None, description="Dataset directory holding dataset.yaml (pipeline only)"
    )
    out_dir: Path = Field(Path("runs"), description="Root directory for run artifacts")

    # Features
    kmeans_k: int = Field(20, description="Number of tweet content categories")
    max_tweets: int = Field(200, description="Most recent tweets kept per user")
    temporal_window: int = Field(12, description="Months in the activity window")
    drop_blocks: List[str] = Field(
        default_factory=list, description="Feature blocks left out (ablation)"
    )

    # Pre-classifier
    mlp_hidden: int = Field(128, description="Pre-classifier hidden width")
    mlp_epochs: int = Field(200, description="Maximum pre-classifier epochs")
    mlp_lr: float = Field(1e-2, description="Pre-classifier learning rate")
    mlp_patience: int = Field(10, description="Epochs without fitting-loss improvement")
    mlp_optimizer: Literal["adam", "sgd"] = Field(
        "adam", description="Full-batch optimizer"
    )
    mlp_activated_hidden: bool = Field(
        False, description="Apply leaky-relu to the hidden representation"
    )

    # Sampling
    sampling: Literal["biased", "ppr"] = Field("biased", description="Subgraph sampler")
    k: int = Field(32, description="Nodes selected per relation")
    alpha: float = Field(0.15, description="PPR teleport probability")
    eps: float = Field(1e-4, description="PPR push tolerance")
    lam: float = Field(
        0.5, alias="lambda", description="Weight of PPR in combined scores"
    )
    reverse: bool = Field(False, description="Walk in-edges instead of out-edges")
    sample_nodes: Literal["labeled", "all"] = Field(
        "labeled", description="Start nodes to sample subgraphs for"
    )

    # Subgraph GNN
    gnn_hidden: int = Field(64, description="GNN hidden width")
    gnn_layers: int = Field(2, description="GCN layers per relation")
    attention_dim: int = Field(32, description="Semantic attention width")
    concat_intermediate: bool = Field(True, description="Concatenate all layer outputs")
    fusion: Literal["attention", "mean"] = Field(
        "attention", description="Relation fusion"
    )
    batch_size: int = Field(64, description="Subgraphs per training batch")
    lr: float = Field(1e-3, description="GNN learning rate")
    max_epochs: int = Field(100, description="Maximum GNN epochs")
    patience: int = Field(10, description="Epochs without validation-loss improvement")
    reg_lambda: float = Field(1e-5, description="L2 coefficient in the loss")
    dropout: float = Field(0.3, description="Dropout on hidden rows during training")

    # Run control
    seed: int = Field(0, description="Seed of every stochastic step")
    workers: int = Field(1, description="Threads for torch and the sampler pool")
    ablation_name: Optional[str] = Field(None, description="Tag of an ablation variant")

    @field_validator(
        "kmeans_k",
        "max_tweets",
        "temporal_window",
        "mlp_hidden",
        "k",
        "gnn_hidden",
        "attention_dim",
        "batch_size",
        "workers",
    )
    @classmethod
    def validate_positive(cls, v: int) -> int:
        """Sizes and counts must be at least 1."""
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @field_validator(
        "mlp_epochs", "mlp_patience", "gnn_layers", "max_epochs", "patience", "seed"
    )
    @classmethod
    def validate_non_negative(cls, v: int) -> int:
        if v < 0:
            raise ValueError("must be non-negative")
        return v

    @field_validator("alpha")
    @classmethod
    def validate_alpha(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("alpha must lie in the open interval (0, 1)")
        return v

    @field_validator("eps")
    @classmethod
    def validate_eps(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("eps must be positive")
        return v

    @field_validator("lam", "dropout")
    @classmethod
    def validate_unit_interval(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("must lie in [0, 1]")
        return v

    @field_validator("mlp_lr", "lr", "reg_lambda")
    @classmethod
    def validate_rate(cls, v: float) -> float:
        if v < 0:
            raise ValueError("must be non-negative")
        return v

    @field_validator("drop_blocks")
    @classmethod
    def validate_blocks(cls, v: List[str]) -> List[str]:
        unknown = [name for name in v if name not in BLOCK_NAMES]
        if unknown:
            raise ValueError(
                f"unknown feature blocks {unknown}; expected {list(BLOCK_NAMES)}"
            )
        return v

    def resolved(self) -> Dict[str, Any]:
        """The fully resolved document, as written to config.resolved.yaml."""
        return self.model_dump(mode="json", by_alias=True)


class SynthConfig(BaseModel):
    """
    Parameters of the synthetic graph generator.

    ``edge_probs`` maps each relation to a 2 x 2 matrix indexed
    [source class][target class] with human = 0 and bot = 1. Relations missing
    from it take the ``preset`` probabilities.
    """

    model_config = ConfigDict(extra="forbid")

    n: int = Field(2000, description="Node count")
    bot_fraction: float = Field(0.5, description="Share of bot nodes")
    relations: List[str] = Field(
        default_factory=lambda: ["follow", "friend"], description="Relation names"
    )
    preset: Literal["mixed-pattern", "planted"] = Field(
        "mixed-pattern",
        description="Block probabilities for relations without edge_probs",
    )
    mean_degree: float = Field(10.0, description="Expected out-degree used by presets")
    edge_probs: Dict[str, List[List[float]]] = Field(default_factory=dict)

    description_dim: int = Field(8, description="Width of the description block")
    tweet_dim: int = Field(8, description="Width of the pooled tweet block")
    num_meta_dim: int = Field(4, description="Width of the numerical metadata block")
    cat_meta_dim: int = Field(2, description="Width of the categorical metadata block")
    delta: float = Field(1.4, description="Class-mean gap in feature-std units")

    tweet_embedding_dim: int = Field(8, description="Width of per-tweet embeddings")
    topics: int = Field(20, description="Tweet topic centers")
    tweets_per_user: int = Field(20, description="Mean tweets per user")
    months: int = Field(12, description="Months of generated activity")
    bot_rate: float = Field(20.0, description="Bot tweets per month")
    human_rate: float = Field(20.0, description="Mean human tweets per month")
    human_burstiness: float = Field(
        0.5, description="Gamma shape of human monthly rates"
    )
    behavior_gap: Optional[float] = Field(
        None,
        description="Bot behaviour distinctness in [0, 1]; default min(1, delta / 20)",
    )

    seed: int = Field(0, description="Generator seed")

    @field_validator("n")
    @classmethod
    def validate_n(cls, v: int) -> int:
        if v < 4:
            raise ValueError("n must be at least 4")
        return v

    @field_validator("bot_fraction")
    @classmethod
    def validate_fraction(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("bot_fraction must lie in (0, 1)")
        return v

    @field_validator("delta", "mean_degree", "bot_rate", "human_rate")
    @classmethod
    def validate_non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("must be non-negative")
        return v

    @field_validator("human_burstiness")
    @classmethod
    def validate_shape(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("human_burstiness must be positive")
        return v

    @field_validator(
        "description_dim",
        "tweet_dim",
        "num_meta_dim",
        "cat_meta_dim",
        "tweet_embedding_dim",
        "topics",
        "months",
    )
    @classmethod
    def validate_dims(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @field_validator("tweets_per_user", "seed")
    @classmethod
    def validate_count(cls, v: int) -> int:
        if v < 0:
            raise ValueError("must be non-negative")
        return v

    @field_validator("behavior_gap")
    @classmethod
    def validate_gap(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError("behavior_gap must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def validate_probabilities(self) -> "SynthConfig":
        """Relations are unique and every block matrix is 2 x 2 in [0, 1]."""
        if not self.relations:
            raise ValueError("at least one relation is required")
        if len(set(self.relations)) != len(self.relations):
            raise ValueError(f"relation names must be unique: {self.relations}")
        for name, matrix in self.edge_probs.items():
            if name not in self.relations:
                raise ValueError(f"edge_probs names unknown relation '{name}'")
            if len(matrix) != 2 or any(len(row) != 2 for row in matrix):
                raise ValueError(f"edge_probs['{name}'] must be a 2 x 2 matrix")
            if any(not 0.0 <= p <= 1.0 for row in matrix for p in row):
                raise ValueError(f"edge_probs['{name}'] entries must lie in [0, 1]")
        return self

    @property
    def effective_behavior_gap(self) -> float:
        if self.behavior_gap is not None:
            return self.behavior_gap
        return min(1.0, self.delta / BEHAVIOR_GAP_SCALE)


class DatasetManifest(BaseModel):
    """
    Contents of ``dataset.yaml`` in a dataset directory.

    File names are relative to the directory. Precomputed blocks are binary
    or CSV matrices with one row per user; ``tweets`` plus ``tweet_owners``
    feed the category block and ``monthly_counts`` the temporal block.
    """

    model_config = ConfigDict(extra="forbid")

    n: int
    relations: List[str]
    edges: str = "edges.tsv"
    labels: str = "labels.tsv"
    splits: str = "splits.txt"
    blocks: Dict[str, str] = Field(default_factory=dict)
    tweets: Optional[str] = None
    tweet_owners: Optional[str] = None
    monthly_counts: Optional[str] = None

    @field_validator("blocks")
    @classmethod
    def validate_blocks(cls, v: Dict[str, str]) -> Dict[str, str]:
        unknown = [name for name in v if name not in PRECOMPUTED_BLOCKS]
        if unknown:
            raise ValueError(
                f"blocks {unknown} are not precomputed blocks "
                f"{list(PRECOMPUTED_BLOCKS)}"
            )
        return v

    @model_validator(mode="after")
    def validate_tweets(self) -> "DatasetManifest":
        if (self.tweets is None) != (self.tweet_owners is None):
            raise ValueError("'tweets' and 'tweet_owners' must be given together")
        return self


def format_validation_error(
    error: ValidationError, source: str = "Configuration"
) -> str:
    """Aggregate every pydantic error into one readable message."""
    message = f"{source} validation failed with {len(error.errors())} error(s):\n"
    for item in error.errors():
        loc = ".".join(str(part) for part in item["loc"]) or "<root>"
        message += f"  - {loc}: {item['msg']}\n"
    return message


def load_yaml(path: Path) -> Dict[str, Any]:
    """
    Load a YAML mapping.

    Raises:
        ConfigError: If the file is missing, unparsable or not a mapping
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Configuration file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            content = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"Failed to parse YAML file {path}: {e}") from e
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise ConfigError(
            f"Configuration must be a YAML dictionary in {path}, "
            f"got {type(content).__name__}"
        )
    return content


def dump_yaml(data: Dict[str, Any]) -> str:
    return yaml.safe_dump(data, sort_keys=True, default_flow_style=False)


class ConfigLoader:
    """
    Configuration loader with YAML parsing, Pydantic validation and overrides.

    Documents are flat, so merging is a key-by-key override: later files
    replace values of earlier ones, and explicit ``overrides`` (e.g. from CLI
    options) win over every file.

    Example:
        >>> loader = ConfigLoader(Path("run.yaml"), overrides={"k": 16})
        >>> loader.get("k")
        16
        >>> loader.config.fusion
        'attention'
    """

    def __init__(
        self,
        config_path: Optional[Path] = None,
        merge_configs: Optional[List[Path]] = None,
        overrides: Optional[Dict[str, Any]] = None,
        model: Type[BaseModel] = RunConfig,
    ):
        """
        Args:
            config_path: Primary YAML document (None starts from an empty one)
            merge_configs: Additional documents applied in order
            overrides: Values applied last; None values are ignored
            model: Pydantic model validating the merged document

        Raises:
            ConfigError: If a file is missing or unparsable, or validation fails
        """
        self.config_path = config_path
        self.merge_configs = merge_configs or []
        self.model = model
        self._raw_config: Dict[str, Any] = {}

        if config_path is not None:
            self._raw_config = load_yaml(config_path)
        for merge_path in self.merge_configs:
            self._raw_config.update(load_yaml(merge_path))
        for key, value in (overrides or {}).items():
            if value is not None:
                self._raw_config[key] = value

        self.config = validate_document(
            self._raw_config, model, source=str(config_path or "Configuration")
        )

    def get(self, key: str, default: Any = None, required: bool = False) -> Any:
        """
        Get a configuration value by its document key.

        Raises:
            ConfigError: If required=True and the value is missing or null
        """
        name = key
        for field_name, info in type(self.config).model_fields.items():
            if info.alias == key:
                name = field_name
        value = getattr(self.config, name, default)
        if required and value is None:
            raise ConfigError(
                f"Required configuration key '{key}' is missing or null. "
                f"Please ensure this value is set in your configuration file."
            )
        return value

    def get_raw_config(self) -> Dict[str, Any]:
        """The merged, unvalidated document."""
        return dict(self._raw_config)


def validate_document(
    data: Dict[str, Any], model: Type[ModelT], source: str = "Configuration"
) -> ModelT:
    """
    Validate a mapping against a model, raising ConfigError with every problem.
    """
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e, source)) from e


def load_run_config(path: Optional[Path] = None, **overrides: Any) -> RunConfig:
    """Load a RunConfig from YAML with keyword overrides."""
    loader = ConfigLoader(path, overrides=overrides, model=RunConfig)
    return cast(RunConfig, loader.config)


def load_synth_config(path: Optional[Path] = None, **overrides: Any) -> SynthConfig:
    """Load a SynthConfig from YAML with keyword overrides."""
    loader = ConfigLoader(path, overrides=overrides, model=SynthConfig)
    return cast(SynthConfig, loader.config)


def load_manifest(data_dir: Path) -> DatasetManifest:
    """Read ``dataset.yaml`` of a dataset directory."""
    path = Path(data_dir) / "dataset.yaml"
    return validate_document(load_yaml(path), DatasetManifest, source=str(path))


def write_resolved(path: Path, model: BaseModel) -> Path:
    """Write a validated document as YAML (aliases as keys)."""
    data = model.model_dump(mode="json", by_alias=True)
    return atomic_write_bytes(path, dump_yaml(data).encode("utf-8"))
