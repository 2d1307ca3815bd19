"""
Configuration management for federated experiments.

Layering (later overrides earlier):
  1. Field defaults below (they reproduce the default two-server run)
  2. config.yaml (or a JSON file; yaml.safe_load reads both)
  3. .env file
  4. Environment variables, prefix FEDSIM_, nested with "__"
     e.g. FEDSIM_ROUNDS=5, FEDSIM_TRAIN__EPOCHS=10

Usage:
    from src.config import load_config
    config = load_config("config.yaml")
    print(config.topology.servers[0].aggregator.strategy)
"""

import re
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Type

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from src.errors import ConfigError
from src.transport import FaultPlan

_ENDPOINT_RE = re.compile(r"^[A-Za-z0-9_.\-]+:\d{1,5}$")


# ── Aggregation ────────────────────────────────────────────────

class Strategy(str, Enum):
    FEDAVG = "FedAvg"
    FEDAVGM = "FedAvgM"
    FEDADAGRAD = "FedAdaGrad"
    FEDYOGI = "FedYogi"
    FEDADAM = "FedAdam"


class UpdateMode(str, Enum):
    """How FedAvg applies the averaged update (adaptive strategies always step)."""
    REPLACE = "Replace"
    DELTA = "Delta"


class AggregatorConfig(BaseModel):
    """Server-side strategy and its hyperparameters."""
    strategy: Strategy = Strategy.FEDAVG
    eta: Optional[float] = Field(default=None, gt=0)  # None -> 1.0 (Delta) / 0.1
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.99, ge=0.0, le=1.0)
    epsilon: float = Field(default=1e-3, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    update_mode: UpdateMode = UpdateMode.REPLACE

    @model_validator(mode="after")
    def _default_eta(self) -> "AggregatorConfig":
        if self.eta is None:
            self.eta = 1.0 if self.update_mode is UpdateMode.DELTA else 0.1
        return self


# ── Local training ─────────────────────────────────────────────

class TrainConfig(BaseModel):
    """Client-side full-batch gradient descent."""
    epochs: int = Field(default=25, ge=1)
    learning_rate: float = Field(default=0.01, gt=0)
    seed: int = Field(default=0, ge=0, lt=2**64)  # reserved for minibatching


# ── Data ───────────────────────────────────────────────────────

class SyntheticSpec(BaseModel):
    rows_per_region: int = Field(default=200, ge=1)
    regions: int = Field(default=9, ge=1)
    noise_std: float = Field(default=0.05, ge=0.0)
    seed: Optional[int] = None  # falls back to the experiment seed


class CsvSource(BaseModel):
    """Recharge-event exports plus the station -> region mapping."""
    paths: List[str] = Field(min_length=1)
    station_map: Optional[str] = None
    schema_map: Optional[str] = None


class DataConfig(BaseModel):
    source: Literal["synthetic", "csv"] = "synthetic"
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    csv: Optional[CsvSource] = None
    holdout_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _csv_needs_paths(self) -> "DataConfig":
        if self.source == "csv" and self.csv is None:
            raise ValueError("data.source is 'csv' but data.csv is not set")
        return self


# ── Topology ───────────────────────────────────────────────────

class ServerSpec(BaseModel):
    """One global server as seen from the config file."""
    id: str = Field(min_length=1)
    endpoint: Optional[str] = None  # host:port for the TCP transport
    aggregator: AggregatorConfig = Field(default_factory=AggregatorConfig)
    quorum: Optional[int] = Field(default=None, ge=1)
    round_timeout_s: float = Field(default=30.0, gt=0)

    @field_validator("endpoint")
    @classmethod
    def _endpoint_format(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and not _ENDPOINT_RE.match(v):
            raise ValueError(f"endpoint must look like host:port, got {v!r}")
        return v


def _default_servers() -> List[ServerSpec]:
    return [ServerSpec(id="gs1"), ServerSpec(id="gs2")]


class TopologyConfig(BaseModel):
    """
    Which clients talk to which servers.

    shared   -> every client lists all servers, in config order
    disjoint -> clients are split into contiguous blocks, one per server;
                the other servers follow as failover targets
    explicit -> explicit_map gives each client its ordered server list
    """
    servers: List[ServerSpec] = Field(default_factory=_default_servers, min_length=1)
    clients: Optional[int] = Field(default=None, ge=1)  # None -> one per region
    assignment: Literal["shared", "disjoint", "explicit"] = "shared"
    explicit_map: Dict[str, List[str]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_servers(self) -> "TopologyConfig":
        ids = [s.id for s in self.servers]
        if len(ids) != len(set(ids)):
            raise ValueError(f"server ids must be unique, got {ids}")
        known = set(ids)
        for client, listed in self.explicit_map.items():
            unknown = [s for s in listed if s not in known]
            if unknown:
                raise ValueError(f"explicit_map[{client!r}] names unknown servers {unknown}")
        return self

    @property
    def server_ids(self) -> List[str]:
        return [s.id for s in self.servers]


# ── Root ───────────────────────────────────────────────────────

class ExperimentConfig(BaseSettings):
    """Root configuration; defaults mirror the two-server, nine-region study."""
    data: DataConfig = Field(default_factory=DataConfig)
    topology: TopologyConfig = Field(default_factory=TopologyConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    rounds: int = Field(default=3, ge=1)
    fault_plan: FaultPlan = Field(default_factory=FaultPlan)
    seed: int = 0
    output_dir: str = "./results"
    log_level: str = "INFO"

    model_config = SettingsConfigDict(
        env_prefix="FEDSIM_",
        env_nested_delimiter="__",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        # Environment beats .env beats the config file.
        return env_settings, dotenv_settings, init_settings, file_secret_settings

    @property
    def synthetic_seed(self) -> int:
        seed = self.data.synthetic.seed
        return self.seed if seed is None else seed


def load_config(config_path: str = "config.yaml") -> ExperimentConfig:
    """
    Load an experiment config from YAML/JSON plus environment overrides.

    A missing or empty file yields the defaults. Invalid content raises
    ConfigError with the validation detail.
    """
    data: dict = {}
    config_file = Path(config_path)

    if config_file.exists():
        try:
            with open(config_file, encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Could not parse {config_path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{config_path} must contain a mapping at the top level")

    try:
        return ExperimentConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration in {config_path}:\n{e}") from e
