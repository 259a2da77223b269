"""Run configuration: schema, validation and typed views."""

from __future__ import annotations

import copy
import json
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

from jsonschema import Draft7Validator
from singer_sdk import typing as th

from itnn_codec.codec import RateDistortionConfig
from itnn_codec.errors import ConfigError, ItnnCodecError
from itnn_codec.nn_train import TrainingHyperparams
from itnn_codec.pipeline import PipelineConfig

PIPELINE_SCHEMA = th.ObjectType(
    th.Property(
        "qp_set",
        th.ArrayType(th.IntegerType),
        default=[22, 27, 32, 37, 42],
        description="QPs drawn uniformly per image while building training sets",
    ),
    th.Property("q", th.IntegerType, default=20, description="Maximum pairs one image adds to one training set"),
    th.Property("gamma", th.NumberType, default=1.05, description="Cleansing threshold on d_nn / d_c"),
    th.Property("iterations", th.IntegerType, default=3, description="Number of training iterations"),
    th.Property("p", th.IntegerType, default=1, description="Multiplier of every learning-rate stage"),
    th.Property(
        "sizes",
        th.ArrayType(th.IntegerType),
        default=[4, 8, 16, 32],
        description="Square block sides that get a network",
    ),
    th.Property("cleansing", th.BooleanType, default=True, description="Filter NN-in-the-loop records"),
    th.Property("warm_start", th.BooleanType, default=True, description="Start each iteration from the last networks"),
    th.Property("hidden_width", th.IntegerType, default=1200, description="Neurons per hidden layer"),
)

TRAINING_SCHEMA = th.ObjectType(
    th.Property("weight_decay", th.NumberType, default=0.0005, description="Coefficient of the squared weight norm"),
    th.Property("batch_size", th.IntegerType, default=64, description="Pairs per optimizer step"),
    th.Property("learning_rate", th.NumberType, default=1e-4, description="Learning rate of the first stage"),
    th.Property("momentum", th.NumberType, default=0.9, description="Momentum coefficient"),
    th.Property(
        "stages",
        th.ArrayType(
            th.ObjectType(
                th.Property("steps", th.IntegerType, required=True),
                th.Property("lr_multiplier", th.NumberType, required=True),
            )
        ),
        default=[
            {"steps": 2000, "lr_multiplier": 1.0},
            {"steps": 1000, "lr_multiplier": 0.1},
            {"steps": 500, "lr_multiplier": 0.01},
        ],
        description="Learning-rate stages, each run p times as many steps",
    ),
)

RATE_DISTORTION_SCHEMA = th.ObjectType(
    th.Property("qp", th.IntegerType, default=32, description="QP of single-frame encodes"),
    th.Property("lambda_scale", th.NumberType, default=0.57, description="Scale of lambda_rd"),
)

RUN_CONFIG_SCHEMA = th.PropertiesList(
    th.Property("corpus_dir", th.StringType, description="Directory of PGM training or evaluation images"),
    th.Property("output_dir", th.StringType, description="Directory receiving run artifacts"),
    th.Property("models_dir", th.StringType, description="Directory holding model_<h>x<w>.bin files"),
    th.Property("seed", th.IntegerType, default=0, description="Root of every random draw"),
    th.Property("jobs", th.IntegerType, default=1, description="Images processed concurrently"),
    th.Property("pipeline", PIPELINE_SCHEMA, default={}),
    th.Property("training", TRAINING_SCHEMA, default={}),
    th.Property("rate_distortion", RATE_DISTORTION_SCHEMA, default={}),
).to_dict()


def apply_defaults(schema: t.Mapping[str, t.Any], data: t.Mapping[str, t.Any]) -> dict[str, t.Any]:
    """Fill missing keys with schema defaults, descending into objects."""
    result = copy.deepcopy(dict(data))
    for name, prop in schema.get("properties", {}).items():
        if name not in result and "default" in prop:
            result[name] = copy.deepcopy(prop["default"])
        if isinstance(result.get(name), dict) and "properties" in prop:
            result[name] = apply_defaults(prop, result[name])
    return result


def merge_overrides(base: t.Mapping[str, t.Any], overrides: t.Mapping[str, t.Any]) -> dict[str, t.Any]:
    """Deep-merge ``overrides`` into ``base``; ``None`` values leave ``base`` alone."""
    merged = copy.deepcopy(dict(base))
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_overrides(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def validate_config(data: t.Mapping[str, t.Any], schema: t.Mapping[str, t.Any] = RUN_CONFIG_SCHEMA) -> dict[str, t.Any]:
    """Apply defaults and validate against ``schema``.

    Raises:
        ConfigError: Every violation, one per line.
    """
    effective = apply_defaults(schema, data)
    errors = sorted(Draft7Validator(schema).iter_errors(effective), key=lambda error: list(error.absolute_path))
    if errors:
        lines = [f"{'/'.join(map(str, error.absolute_path)) or '<root>'}: {error.message}" for error in errors]
        raise ConfigError("Invalid configuration:\n" + "\n".join(lines))
    return effective


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration shared by the subcommands."""

    pipeline: PipelineConfig
    training: TrainingHyperparams
    rate_distortion: RateDistortionConfig
    corpus_dir: Path | None = None
    output_dir: Path | None = None
    models_dir: Path | None = None
    effective: dict[str, t.Any] = field(default_factory=dict, compare=False)

    @classmethod
    def from_dict(cls, data: t.Mapping[str, t.Any]) -> RunConfig:
        """Validate a configuration dictionary and build the typed views.

        Raises:
            ConfigError: Schema violations or out-of-range values.
        """
        effective = validate_config(data)
        pipeline = effective["pipeline"]
        training = effective["training"]
        rate_distortion = effective["rate_distortion"]
        try:
            return cls(
                pipeline=PipelineConfig(
                    qp_set=tuple(pipeline["qp_set"]),
                    q=pipeline["q"],
                    gamma=pipeline["gamma"],
                    iterations=pipeline["iterations"],
                    p=pipeline["p"],
                    sizes=tuple((side, side) for side in pipeline["sizes"]),
                    seed=effective["seed"],
                    cleansing=pipeline["cleansing"],
                    warm_start=pipeline["warm_start"],
                    hidden_width=pipeline["hidden_width"],
                    lambda_scale=rate_distortion["lambda_scale"],
                    jobs=effective["jobs"],
                ),
                training=TrainingHyperparams(
                    weight_decay=training["weight_decay"],
                    batch_size=training["batch_size"],
                    learning_rate=training["learning_rate"],
                    stages=tuple((stage["steps"], stage["lr_multiplier"]) for stage in training["stages"]),
                    p=pipeline["p"],
                    momentum=training["momentum"],
                    seed=effective["seed"],
                ),
                rate_distortion=RateDistortionConfig(
                    qp=rate_distortion["qp"],
                    lambda_scale=rate_distortion["lambda_scale"],
                ),
                corpus_dir=Path(effective["corpus_dir"]) if effective.get("corpus_dir") else None,
                output_dir=Path(effective["output_dir"]) if effective.get("output_dir") else None,
                models_dir=Path(effective["models_dir"]) if effective.get("models_dir") else None,
                effective=effective,
            )
        except ConfigError:
            raise
        except ItnnCodecError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: Path | str | None, overrides: t.Mapping[str, t.Any] | None = None) -> RunConfig:
        """Read a JSON config file (optional) and apply flag overrides on top.

        Raises:
            ConfigError: Unreadable file, invalid JSON or invalid values.
        """
        data: dict[str, t.Any] = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                msg = f"Cannot read config {path}: {exc}"
                raise ConfigError(msg) from exc
            if not isinstance(data, dict):
                msg = f"Config {path} must hold a JSON object"
                raise ConfigError(msg)
        return cls.from_dict(merge_overrides(data, overrides or {}))

    def validate_paths(self, *names: str) -> None:
        """Check that the named input directories are set and exist.

        Raises:
            ConfigError: A directory is missing.
        """
        for name in names or ("corpus_dir", "models_dir"):
            value = getattr(self, name)
            if value is None:
                msg = f"{name} is required"
                raise ConfigError(msg)
            if not value.is_dir():
                msg = f"{name} {value} does not exist"
                raise ConfigError(msg)
