"""Configuration management for rankstack.

Process settings come from the environment (optionally a .env file);
experiment settings come from a YAML file validated by ConfigGuardrails.
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


@dataclass
class LangfuseConfig:
    """Langfuse observability configuration."""

    public_key: str
    secret_key: str
    host: str
    environment: str = "development"
    enabled: bool = True


@dataclass
class AppConfig:
    """Process-level configuration."""

    output_root: str
    threads: int
    log_level: str
    langfuse: LangfuseConfig

    @classmethod
    def from_env(cls) -> "AppConfig":
        """Load configuration from environment variables."""
        threads_raw = os.getenv("RANKSTACK_THREADS", "1")
        try:
            threads = int(threads_raw)
        except ValueError:
            raise ValueError(f"RANKSTACK_THREADS must be an integer, got {threads_raw!r}") from None
        if threads < 1:
            raise ValueError(f"RANKSTACK_THREADS must be >= 1, got {threads}")

        log_level = os.getenv("RANKSTACK_LOG_LEVEL", "INFO").upper()
        if log_level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"RANKSTACK_LOG_LEVEL is not a logging level: {log_level}")

        # Langfuse config (optional)
        langfuse_enabled = os.getenv("LANGFUSE_ENABLED", "true").lower() == "true"
        langfuse = LangfuseConfig(
            public_key=os.getenv("LANGFUSE_PUBLIC_KEY", ""),
            secret_key=os.getenv("LANGFUSE_SECRET_KEY", ""),
            host=os.getenv("LANGFUSE_HOST", "https://cloud.langfuse.com"),
            environment=os.getenv("LANGFUSE_TRACING_ENVIRONMENT", "development"),
            enabled=langfuse_enabled and bool(os.getenv("LANGFUSE_PUBLIC_KEY")),
        )

        return cls(
            output_root=os.getenv("RANKSTACK_OUTPUT_ROOT", "runs"),
            threads=threads,
            log_level=log_level,
            langfuse=langfuse,
        )


@dataclass
class ModelSpec:
    kind: str = "mlp"
    hidden_dim: int = 64
    hidden_layers: int = 2
    pretrain_epochs: int = 2
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 64


@dataclass
class DatasetSpec:
    csv: Optional[str] = None
    synthetic: Optional[Dict[str, Any]] = None
    split_seed: int = 0
    train_fraction: float = 0.8
    test_fraction: float = 0.2


@dataclass
class ArmSpec:
    name: str
    boost: Any  # tools.boosting.BoostConfig


@dataclass
class ExperimentConfig:
    """A validated experiment: one dataset and model, one or more arms."""

    name: str
    seed: int
    model: ModelSpec
    dataset: DatasetSpec
    arms: List[ArmSpec] = field(default_factory=list)
    source: Optional[str] = None

    @classmethod
    def from_dict(
        cls,
        raw: Dict[str, Any],
        base_dir: Optional[str] = None,
        seed: Optional[int] = None,
        enable_tracing: bool = False,
    ) -> "ExperimentConfig":
        """Validate a parsed config and build the experiment.

        Raises:
            ConfigurationError: If any field is invalid; `field` names it
        """
        from tools.config_guardrails import (
            ConfigGuardrails,
            arm_overrides,
            build_adapter_config,
            build_boost_config,
            resolve_path,
        )
        from utils.errors import ConfigurationError

        raw = dict(raw) if isinstance(raw, dict) else raw
        if seed is not None and isinstance(raw, dict):
            raw["seed"] = seed

        guard = ConfigGuardrails(enable_tracing=enable_tracing)
        ok, reason = guard.validate(raw, base_dir)
        if not ok:
            field_path = guard.failed_field
            prefix = f"{field_path}: "
            message = reason[len(prefix):] if field_path and reason.startswith(prefix) else reason
            raise ConfigurationError(message, field=field_path)

        model = ModelSpec(**{k: v for k, v in raw.get("model", {}).items()})
        model.kind = model.kind.lower()
        model.pretrain_lr = float(model.pretrain_lr)

        dataset_raw = dict(raw["dataset"])
        if "csv" in dataset_raw:
            dataset_raw["csv"] = str(resolve_path(dataset_raw["csv"], base_dir))
        for key in ("train_fraction", "test_fraction"):
            if key in dataset_raw:
                dataset_raw[key] = float(dataset_raw[key])
        dataset = DatasetSpec(**dataset_raw)
        if "split_seed" not in dataset_raw:
            dataset.split_seed = raw.get("seed", 0)

        arms = []
        for i, arm in enumerate(arm_overrides(raw)):
            prefix = f"arms[{i}]" if "arms" in raw else ""
            adapter_cfg = build_adapter_config(raw, arm, prefix)
            arms.append(ArmSpec(name=arm["name"], boost=build_boost_config(raw, arm, adapter_cfg, prefix)))

        return cls(
            name=raw["name"],
            seed=raw.get("seed", 0),
            model=model,
            dataset=dataset,
            arms=arms,
        )

    @classmethod
    def from_yaml(
        cls, path: str, seed: Optional[int] = None, enable_tracing: bool = False
    ) -> "ExperimentConfig":
        """Load and validate an experiment config file."""
        from utils.errors import ConfigurationError

        config_path = Path(path)
        if not config_path.exists():
            raise ConfigurationError(f"config file not found: {path}", field="config")
        try:
            with open(config_path, encoding="utf-8") as f:
                raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"not valid YAML: {e}", field="config") from e
        if raw is None:
            raise ConfigurationError("config file is empty", field="config")

        config = cls.from_dict(raw, base_dir=str(config_path.parent), seed=seed, enable_tracing=enable_tracing)
        config.source = str(config_path)
        logger.info(f"Loaded experiment '{config.name}' with {len(config.arms)} arm(s) from {path}")
        return config
