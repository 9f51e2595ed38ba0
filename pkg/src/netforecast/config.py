"""
Run configuration: validated settings models, INI loading, overrides and seeds.

A :class:`RunConfig` is fully serialized into every artifact, so any run can be
repeated from the header of its own outputs.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import zlib
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

SEED_CONSUMERS = ("init", "shuffle", "synthetic")
SECTIONS = ("run", "data", "graph", "model", "train", "eval")


class ConfigError(ValueError):
    """Raised for malformed configuration files or override strings."""

    pass


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        text = value.strip()
        if text.lower() in ("", "none", "[]"):
            return []
        return [part.strip() for part in text.strip("[]()").split(",") if part.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataConfig(_Section):
    window: int = Field(12, ge=1)
    horizon: int = Field(1, ge=1)
    stride: int = Field(1, ge=1)
    normalization: Literal["zscore", "minmax"] = "zscore"
    split: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    purge: bool = False
    time_features: bool = False

    @field_validator("split", mode="before")
    @classmethod
    def _parse_split(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("split")
    @classmethod
    def _check_split(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(f <= 0 for f in v):
            raise ValueError(f"split fractions must be positive, got {v}")
        if abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(v)}")
        return v


class GraphConfig(_Section):
    adjacency: Literal["distance", "correlation", "knn", "adaptive", "learnable", "explicit"] = "explicit"
    tau: float = Field(0.5, ge=0.0, le=1.0)
    k: int = Field(3, ge=1)
    sigma: Optional[float] = Field(None, gt=0.0)
    epsilon: float = Field(0.1, ge=0.0, lt=1.0)
    adaptive_window: int = Field(288, ge=3)
    adaptive_stride: int = Field(288, ge=1)
    embedding_dim: int = Field(8, ge=1)
    adjacency_csv: Optional[str] = None


class ModelConfig(_Section):
    gcn_hidden: List[int] = Field(default_factory=lambda: [32, 32], min_length=1)
    gcn_activation: Literal["relu", "tanh", "sigmoid", "identity"] = "relu"
    attention: bool = False
    attention_all_layers: bool = True
    attention_dim: int = Field(16, ge=1)
    attention_activation: Literal["relu", "leaky_relu"] = "relu"
    attention_slope: float = Field(0.2, ge=0.0)
    temporal: Literal["gru", "lstm"] = "gru"
    hidden: int = Field(64, ge=1)
    gru_bias: bool = False
    head_hidden: List[int] = Field(default_factory=lambda: [32])

    @field_validator("gcn_hidden", "head_hidden", mode="before")
    @classmethod
    def _parse_widths(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("gcn_hidden", "head_hidden")
    @classmethod
    def _positive_widths(cls, v: List[int]) -> List[int]:
        if any(w < 1 for w in v):
            raise ValueError(f"layer widths must be >= 1, got {v}")
        return v


class TrainConfig(_Section):
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    clip_norm: Optional[float] = Field(5.0, gt=0.0)
    patience: int = Field(10, ge=1)
    progress: bool = False
    record_wall_clock: bool = False


class EvalConfig(_Section):
    batch_size: int = Field(64, ge=1)
    split: Literal["train", "val", "test"] = "test"


class RunConfig(_Section):
    """Every setting of a run; ``seed`` is the root of all randomness."""

    seed: int = Field(0, ge=0)
    data: DataConfig = Field(default_factory=DataConfig)
    graph: GraphConfig = Field(default_factory=GraphConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _check_cross_fields(self) -> "RunConfig":
        if self.graph.adjacency == "adaptive" and self.graph.adaptive_stride > self.graph.adaptive_window:
            logger.warning(
                f"adaptive stride {self.graph.adaptive_stride} exceeds window {self.graph.adaptive_window}; "
                "some rows never enter a correlation window"
            )
        return self

    def to_json(self) -> str:
        """Canonical single-line JSON (sorted keys)."""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def flat(self) -> Dict[str, Any]:
        """Dotted ``section.key`` view; ``seed`` stays top-level."""
        out: Dict[str, Any] = {"seed": self.seed}
        for section, values in self.model_dump(mode="json").items():
            if isinstance(values, dict):
                for key, value in values.items():
                    out[f"{section}.{key}"] = value
        return out


def config_fingerprint(config: RunConfig) -> str:
    """Short sha1 of the canonical JSON dump."""
    return hashlib.sha1(config.to_json().encode()).hexdigest()[:12]


def config_delta(base: RunConfig, other: RunConfig) -> Dict[str, Any]:
    """Dotted keys whose values differ from ``base``, with ``other``'s values."""
    a, b = base.flat(), other.flat()
    return {k: b[k] for k in b if a.get(k) != b[k]}


def derive_seed(root: int, consumer: str) -> int:
    """Independent 32-bit seed for one randomness consumer, split from the root seed."""
    if consumer not in SEED_CONSUMERS:
        raise ConfigError(f"Unknown seed consumer '{consumer}'; expected one of {', '.join(SEED_CONSUMERS)}")
    seq = np.random.SeedSequence([int(root), zlib.crc32(consumer.encode())])
    return int(seq.generate_state(1)[0])


def parse_override(text: str) -> Tuple[str, str]:
    """Split ``section.key=value`` into (``section.key``, ``value``)."""
    if "=" not in text:
        raise ConfigError(f"Override '{text}' must look like section.key=value")
    key, value = text.split("=", 1)
    key = key.strip()
    if key != "seed" and key != "run.seed" and (key.count(".") != 1 or key.split(".")[0] not in SECTIONS):
        raise ConfigError(f"Override key '{key}' must be section.key with section in {', '.join(SECTIONS[1:])}")
    return key, value.strip()


def _nest(pairs: Iterable[Tuple[str, Any]], into: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    tree: Dict[str, Any] = into if into is not None else {}
    for key, value in pairs:
        if key in ("seed", "run.seed"):
            tree["seed"] = value
            continue
        section, name = key.split(".", 1)
        tree.setdefault(section, {})[name] = value
    return tree


def read_ini(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Read an INI file into the nested mapping :class:`RunConfig` validates.

    Empty values fall back to defaults. ``[run]`` holds ``seed``.

    Raises:
        ConfigError: Unreadable file, syntax errors, unknown sections or keys in ``[run]``.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    pairs: List[Tuple[str, Any]] = []
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]; expected one of {', '.join(SECTIONS)}")
        for key, value in parser.items(section):
            if value.strip() == "":
                continue
            if section == "run":
                if key != "seed":
                    raise ConfigError(f"{path}: unknown key '{key}' in [run]")
                pairs.append(("seed", value))
            else:
                pairs.append((f"{section}.{key}", value))
    return _nest(pairs)


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Union[Mapping[str, Any], Iterable[str], None] = None,
) -> RunConfig:
    """
    Resolve file values plus overrides into a validated :class:`RunConfig`.

    Args:
        path: Optional INI file.
        overrides: ``{"section.key": value}`` or ``["section.key=value", ...]``; these win over the file.

    Raises:
        ConfigError: Malformed file or override.
        pydantic.ValidationError: Unknown keys or out-of-range values.
    """
    tree = read_ini(path) if path is not None else {}
    if overrides:
        if isinstance(overrides, Mapping):
            pairs = list(overrides.items())
        else:
            pairs = [parse_override(o) for o in overrides]
        for key, _ in pairs:
            if key not in ("seed", "run.seed") and key.split(".")[0] not in SECTIONS[1:]:
                raise ConfigError(f"Override key '{key}' names no config section")
        _nest(pairs, tree)
    config = RunConfig.model_validate(tree)
    logger.debug(f"Resolved config {config_fingerprint(config)}: {config.to_json()}")
    return config


def with_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Copy of ``config`` with dotted-key overrides applied and re-validated."""
    tree = config.model_dump(mode="json")
    _nest(overrides.items(), tree)
    return RunConfig.model_validate(tree)


def write_ini(config: RunConfig, path: Union[str, Path]) -> None:
    """Write ``config`` in the INI layout :func:`load_config` reads."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {"seed": str(config.seed)}
    for section, values in config.model_dump(mode="json").items():
        if not isinstance(values, dict):
            continue
        parser[section] = {}
        for key, value in values.items():
            if value is None:
                continue
            if isinstance(value, (list, tuple)):
                text = ",".join(str(v) for v in value) if value else "none"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = str(value)
            parser[section][key] = text
    with open(path, "w") as f:
        parser.write(f)
