"""Fail-closed validation of experiment configuration files.

A typo in r, T or basis silently invalidates an ablation, so every key is
checked against a schema: unknown keys, wrong types, out-of-range values,
missing dataset files and ROTATE windows that cannot fit the model's
adapted layers are all rejected with the dotted path of the offending field.
"""

import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd
from langfuse.decorators import langfuse_context, observe

from tools.adapter import AdapterConfig, Basis
from tools.boosting import BoostConfig
from utils.errors import CapacityExhaustedError, ConfigurationError

logger = logging.getLogger(__name__)

NAME_PATTERN = re.compile(r"^[A-Za-z0-9_.-]+$")

# Leaf types: int, float, bool, str, a tuple of allowed strings, or "int?"
# for an integer that may be null.
ADAPTER_SCHEMA = {
    "rank": int,
    "proj_dim": int,
    "groups": int,
    "basis": ("top", "rotate"),
    "epsilon_rank_eps": float,
    "recompute_top": bool,
}

BOOST_SCHEMA = {
    "rounds": int,
    "lr_base": float,
    "lr_scaling": bool,
    "epochs_per_round": int,
    "early_stop_threshold": "int?",
    "two_phase": bool,
    "batch_size": int,
    "weight_decay": float,
    "warmup_ratio": float,
    "grad_clip": float,
    "head_epochs": int,
    "head_lr": float,
    "failure_focus": bool,
    "store_deltas": bool,
    "track_x": bool,
}

SCHEMA: Dict[str, Any] = {
    "name": str,
    "seed": int,
    "model": {
        "kind": ("linear", "mlp"),
        "hidden_dim": int,
        "hidden_layers": int,
        "pretrain_epochs": int,
        "pretrain_lr": float,
        "pretrain_batch_size": int,
    },
    "dataset": {
        "csv": str,
        "synthetic": {
            "classes": int,
            "dim": int,
            "n": int,
            "separation": float,
            "noise": float,
        },
        "split_seed": int,
        "train_fraction": float,
        "test_fraction": float,
    },
    "adapter": ADAPTER_SCHEMA,
    "boost": BOOST_SCHEMA,
    "arms": [{"name": str, "adapter": ADAPTER_SCHEMA, "boost": BOOST_SCHEMA}],
}


class ConfigGuardrails:
    """Experiment config validator.

    validate() never raises: any unexpected error is reported as a failed
    validation. The dotted path of the failing field is kept in
    `failed_field`.
    """

    def __init__(self, enable_tracing: bool = False):
        self.enable_tracing = enable_tracing
        self.failed_field: Optional[str] = None

    @observe()
    def validate(self, raw: Any, base_dir: Optional[str] = None) -> Tuple[bool, str]:
        """Validate a parsed config mapping.

        Args:
            raw: Mapping loaded from the YAML file
            base_dir: Directory relative dataset paths are resolved against

        Returns:
            Tuple of (is_valid, reason); reason is empty when valid
        """
        self.failed_field = None
        try:
            self._check_schema(raw, SCHEMA, "")
            self._check_required(raw)
            self._check_dataset(raw, base_dir)
            self._check_arms(raw, base_dir)
        except ConfigurationError as e:
            self.failed_field = e.field
            logger.warning(f"Config rejected: {e}")
            if self.enable_tracing:
                langfuse_context.update_current_observation(
                    metadata={"blocked_field": e.field, "is_valid": False}
                )
            return (False, str(e))
        except Exception as e:
            logger.error(f"Error during config validation: {e}", exc_info=True)
            return (False, f"Validation error: {e}")

        if self.enable_tracing:
            langfuse_context.update_current_observation(metadata={"is_valid": True})
        return (True, "")

    def _check_schema(self, value: Any, schema: Any, path: str) -> None:
        if isinstance(schema, dict):
            if not isinstance(value, dict):
                raise ConfigurationError("expected a mapping", field=path or "<root>")
            for key, item in value.items():
                child = f"{path}.{key}" if path else str(key)
                if key not in schema:
                    raise ConfigurationError("unknown key", field=child)
                self._check_schema(item, schema[key], child)
            return
        if isinstance(schema, list):
            if not isinstance(value, list):
                raise ConfigurationError("expected a list", field=path)
            for i, item in enumerate(value):
                self._check_schema(item, schema[0], f"{path}[{i}]")
            return
        self._check_leaf(value, schema, path)

    @staticmethod
    def _check_leaf(value: Any, kind: Any, path: str) -> None:
        if kind == "int?":
            if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigurationError(f"expected an integer or null, got {value!r}", field=path)
        elif isinstance(kind, tuple):
            if not isinstance(value, str) or value.lower() not in kind:
                raise ConfigurationError(f"expected one of {list(kind)}, got {value!r}", field=path)
        elif kind is bool:
            if not isinstance(value, bool):
                raise ConfigurationError(f"expected true or false, got {value!r}", field=path)
        elif kind is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigurationError(f"expected an integer, got {value!r}", field=path)
        elif kind is float:
            if isinstance(value, bool):
                raise ConfigurationError(f"expected a number, got {value!r}", field=path)
            try:
                float(value)
            except (TypeError, ValueError):
                raise ConfigurationError(f"expected a number, got {value!r}", field=path) from None
        elif kind is str:
            if not isinstance(value, str) or not value:
                raise ConfigurationError(f"expected a nonempty string, got {value!r}", field=path)

    @staticmethod
    def _check_required(raw: Dict[str, Any]) -> None:
        if "name" not in raw:
            raise ConfigurationError("missing", field="name")
        if not NAME_PATTERN.match(raw["name"]):
            raise ConfigurationError("may only contain letters, digits, '_', '.' and '-'", field="name")
        if "dataset" not in raw:
            raise ConfigurationError("missing", field="dataset")

    def _check_dataset(self, raw: Dict[str, Any], base_dir: Optional[str]) -> None:
        dataset = raw["dataset"]
        has_csv = "csv" in dataset
        has_synthetic = "synthetic" in dataset
        if has_csv == has_synthetic:
            raise ConfigurationError("exactly one of 'csv' or 'synthetic' is required", field="dataset")
        if has_csv:
            path = resolve_path(dataset["csv"], base_dir)
            if not path.exists():
                raise ConfigurationError(f"file not found: {path}", field="dataset.csv")
        else:
            synthetic = dataset["synthetic"]
            classes = synthetic.get("classes", 10)
            if classes < 2:
                raise ConfigurationError(f"must be >= 2, got {classes}", field="dataset.synthetic.classes")
            if synthetic.get("n", 50000) < classes:
                raise ConfigurationError("must be at least the number of classes", field="dataset.synthetic.n")
            if synthetic.get("dim", 64) < 1:
                raise ConfigurationError("must be >= 1", field="dataset.synthetic.dim")
        train = float(dataset.get("train_fraction", 0.8))
        test = float(dataset.get("test_fraction", 0.2))
        if not 0.0 < train <= 1.0:
            raise ConfigurationError(f"must lie in (0, 1], got {train}", field="dataset.train_fraction")
        if not 0.0 <= test < 1.0 or train + test > 1.0 + 1e-12:
            raise ConfigurationError(
                f"must lie in [0, 1) with train_fraction + test_fraction <= 1, got {test}",
                field="dataset.test_fraction",
            )

    def _check_arms(self, raw: Dict[str, Any], base_dir: Optional[str]) -> None:
        widths = adapted_widths(raw, self._dataset_shape(raw, base_dir))
        names = set()
        for i, arm in enumerate(arm_overrides(raw)):
            prefix = f"arms[{i}]" if "arms" in raw else ""
            name = arm["name"]
            if not NAME_PATTERN.match(name):
                raise ConfigurationError("invalid arm name", field=f"{prefix}.name" if prefix else "name")
            if name in names:
                raise ConfigurationError(f"duplicate arm name '{name}'", field=f"{prefix}.name")
            names.add(name)
            adapter_cfg = build_adapter_config(raw, arm, prefix)
            boost_cfg = build_boost_config(raw, arm, adapter_cfg, prefix)
            self._check_capacity(boost_cfg, widths, prefix)
            if boost_cfg.two_phase and not _has_head(raw):
                raise ConfigurationError(
                    "two-phase training needs a model with a head", field=_prefixed(prefix, "boost.two_phase")
                )

    @staticmethod
    def _check_capacity(cfg: BoostConfig, widths: List[int], prefix: str) -> None:
        p = min(widths)
        r = cfg.adapter.rank
        if r > p:
            raise ConfigurationError(
                f"rank {r} exceeds the smallest adapted width {p}", field=_prefixed(prefix, "adapter.rank")
            )
        if cfg.adapter.basis == Basis.ROTATE and r * cfg.rounds > p:
            exhausted = CapacityExhaustedError(round_index=p // r + 1, r=r, p=p)
            raise ConfigurationError(str(exhausted), field=_prefixed(prefix, "boost.rounds"))
        if cfg.adapter.groups > len(widths):
            raise ConfigurationError(
                f"{cfg.adapter.groups} tying groups but only {len(widths)} adapted module(s)",
                field=_prefixed(prefix, "adapter.groups"),
            )

    @staticmethod
    def _dataset_shape(raw: Dict[str, Any], base_dir: Optional[str]) -> Tuple[int, int]:
        """(feature dimension, class count) of the configured dataset."""
        dataset = raw["dataset"]
        if "synthetic" in dataset:
            synthetic = dataset["synthetic"]
            return synthetic.get("dim", 64), synthetic.get("classes", 10)
        path = resolve_path(dataset["csv"], base_dir)
        header = pd.read_csv(path, nrows=0)
        if "label" not in header.columns:
            raise ConfigurationError("dataset file has no 'label' column", field="dataset.csv")
        labels = pd.read_csv(path, usecols=["label"])["label"]
        return len(header.columns) - 1, max(int(labels.max()) + 1, 2)


def resolve_path(path: str, base_dir: Optional[str]) -> Path:
    candidate = Path(path)
    if not candidate.is_absolute() and base_dir is not None:
        candidate = Path(base_dir) / candidate
    return candidate


def _has_head(raw: Dict[str, Any]) -> bool:
    return raw.get("model", {}).get("kind", "mlp").lower() != "linear"


def adapted_widths(raw: Dict[str, Any], shape: Tuple[int, int]) -> List[int]:
    """min(d, k) of every adapted layer the model section describes."""
    dim, classes = shape
    model = raw.get("model", {})
    if model.get("kind", "mlp").lower() == "linear":
        return [min(dim, classes)]
    hidden = model.get("hidden_dim", 64)
    layers = model.get("hidden_layers", 2)
    return [min(hidden, dim)] + [hidden] * layers


def arm_overrides(raw: Dict[str, Any]) -> List[Dict[str, Any]]:
    arms = raw.get("arms")
    if not arms:
        return [{"name": "main"}]
    for i, arm in enumerate(arms):
        if "name" not in arm:
            raise ConfigurationError("missing", field=f"arms[{i}].name")
    return arms


def _merged(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    merged.update(override)
    return merged


def build_adapter_config(raw: Dict[str, Any], arm: Dict[str, Any], prefix: str = "") -> AdapterConfig:
    values = _merged(raw.get("adapter", {}), arm.get("adapter", {}))
    if "basis" in values:
        values["basis"] = Basis(values["basis"].lower())
    for key in ("epsilon_rank_eps",):
        if key in values:
            values[key] = float(values[key])
    values.setdefault("seed", raw.get("seed", 0))
    try:
        return AdapterConfig(**values)
    except ConfigurationError as e:
        raise ConfigurationError(e.reason, field=_prefixed(prefix, e.field)) from e


def build_boost_config(
    raw: Dict[str, Any], arm: Dict[str, Any], adapter: AdapterConfig, prefix: str = ""
) -> BoostConfig:
    values = _merged(raw.get("boost", {}), arm.get("boost", {}))
    for key, kind in BOOST_SCHEMA.items():
        if kind is float and key in values:
            values[key] = float(values[key])
    values.setdefault("seed", raw.get("seed", 0))
    try:
        return BoostConfig(adapter=adapter, **values)
    except ConfigurationError as e:
        raise ConfigurationError(e.reason, field=_prefixed(prefix, e.field)) from e


def _prefixed(prefix: str, field: Optional[str]) -> Optional[str]:
    if not prefix or field is None:
        return field
    return f"{prefix}.{field}"
