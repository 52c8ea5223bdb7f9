"""Run configuration: one TOML file drives every command.

The file is flat typed key-value with sections; every key has a default,
unknown keys are rejected with the offending line, and any key can be
overridden from the environment as COOPSIM_<SECTION>_<KEY> (top-level keys
as COOPSIM_SEED / COOPSIM_OUTPUT_DIR). Values from the environment are
parsed with the same TOML grammar as the file.
"""

from __future__ import annotations

import copy
import os
import re
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from coopsim.bev import GridSpec
from coopsim.detector import LossWeights
from coopsim.evaluation import NOISE_MAGNITUDES, SCALE_COUNTS
from coopsim.training import STRATEGIES, TrainConfig
from coopsim.aggregate import AGGREGATION_MODES
from coopsim.worldgen import LidarSpec, WorldConfig

__all__ = [
    "ConfigError",
    "RunConfig",
    "NetworkScale",
    "DatasetConfig",
    "EvalConfig",
    "SweepConfig",
    "default_config",
    "load_config",
    "parse_method_token",
    "config_reference",
    "FULL_ENCODER_WIDTHS",
    "FULL_HEAD_WIDTHS",
]

FULL_ENCODER_WIDTHS = (64, 128, 128)
FULL_HEAD_WIDTHS = (256, 256)

PIPELINE_TOKENS = (
    "raw", "feature-sum", "feature-maxout", "feature-maxnorm", "hypothesis"
)


class ConfigError(ValueError):
    """Bad configuration; the message is anchored to the offending line."""


@dataclass(frozen=True)
class NetworkScale:
    """Width divisor applied to the full-size architecture, plus pool count."""

    widths_divisor: int = 8
    encoder_pools: int = 2

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        return tuple(max(1, w // self.widths_divisor) for w in FULL_ENCODER_WIDTHS)

    @property
    def head_widths(self) -> tuple[int, ...]:
        return tuple(max(1, w // self.widths_divisor) for w in FULL_HEAD_WIDTHS)

    @property
    def feature_channels(self) -> int:
        return self.encoder_widths[-1]

    @property
    def downsample(self) -> int:
        return 2 ** self.encoder_pools


@dataclass(frozen=True)
class DatasetConfig:
    train_frames: int = 20
    test_frames: int = 10


@dataclass(frozen=True)
class EvalConfig:
    methods: tuple[str, ...] = ("raw@svt", "feature-sum@svt", "hypothesis@svt")
    n_coop: int = 1
    alignment: bool = True
    conf_threshold: float = 0.5


@dataclass(frozen=True)
class SweepConfig:
    noise_magnitudes: tuple[float, ...] = NOISE_MAGNITUDES
    coop_counts: tuple[int, ...] = SCALE_COUNTS
    n_coop: int = 1
    radius_m: float = 40.0


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    world: WorldConfig = field(default_factory=WorldConfig)
    lidar: LidarSpec = field(default_factory=LidarSpec)
    grid: GridSpec = field(default_factory=lambda: GridSpec(resolution_px=128))
    network: NetworkScale = field(default_factory=NetworkScale)
    loss: LossWeights = field(default_factory=LossWeights)
    training: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def train_config(self) -> TrainConfig:
        """The training section combined with the loss weights and root seed."""
        t = self.training
        return TrainConfig(
            strategy=t.strategy, epochs=t.epochs,
            learning_rate=t.learning_rate, momentum=t.momentum,
            batch_size=t.batch_size, decay_at=t.decay_at,
            aggregation=t.aggregation, pair_radius_m=t.pair_radius_m,
            loss_weights=self.loss, seed=self.seed,
        )


# section -> key -> default; the single source of truth for names, types,
# and the generated key reference.
_DEFAULTS: dict[str, dict[str, object]] = {
    "world": {
        "width_m": 100.0, "length_m": 100.0, "vehicles": 8, "pedestrians": 4,
        "occluders": 6, "lidar_vehicles": 8, "occluder_min_m": 4.0,
        "occluder_max_m": 12.0, "occluder_height_m": 3.0,
        "ground_plane": False, "placement_retries": 1000,
    },
    "lidar": {
        "azimuth_step_deg": 0.15, "beams": 16, "elevation_min_deg": -15.0,
        "elevation_max_deg": 5.0, "range_m": 40.0, "ground_plane": False,
    },
    "grid": {"resolution_px": 128, "half_range_m": 40.0, "saturation": 16},
    "network": {"widths_divisor": 8, "encoder_pools": 2},
    "loss": {
        "loc": 1.0, "shape": 1.0, "yaw": 0.5, "objectness": 1.0,
        "background": 0.5, "classify": 1.0,
    },
    "training": {
        "strategy": "svt", "epochs": 40, "learning_rate": 0.01,
        "momentum": 0.9, "batch_size": 8, "decay_at": [0.6, 0.85],
        "aggregation": "sum", "pair_radius_m": 40.0,
    },
    "dataset": {"train_frames": 20, "test_frames": 10},
    "eval": {
        "methods": ["raw@svt", "feature-sum@svt", "hypothesis@svt"],
        "n_coop": 1, "alignment": True, "conf_threshold": 0.5,
    },
    "sweep": {
        "noise_magnitudes": list(NOISE_MAGNITUDES),
        "coop_counts": list(SCALE_COUNTS),
        "n_coop": 1, "radius_m": 40.0,
    },
}
_TOP_LEVEL: dict[str, object] = {"seed": 0, "output_dir": "out"}

_KEY_DOCS = {
    "seed": "root seed; every random draw derives from it",
    "output_dir": "all artifacts go under this directory",
    "world": "scene generation",
    "lidar": "ray casting sensor model",
    "grid": "bird's-eye-view raster",
    "network": "architecture scale (widths divided by the divisor; "
               "cell size is 2**encoder_pools pixels)",
    "loss": "loss term weights",
    "training": "optimizer schedule and strategy (svt or cvt)",
    "dataset": "frames per split written by gen",
    "eval": "methods are pipeline@strategy tokens; pipeline is one of "
            + ", ".join(PIPELINE_TOKENS),
    "sweep": "grids for sweep-noise and sweep-scale",
}


def parse_method_token(token: str) -> tuple[str, str, str]:
    """'feature-maxout@cvt' -> (pipeline, aggregation, strategy)."""
    pipeline_tok, sep, strategy = token.partition("@")
    if not sep:
        strategy = "svt"
    if pipeline_tok not in PIPELINE_TOKENS:
        raise ConfigError(
            f"unknown pipeline {pipeline_tok!r}; expected one of "
            + ", ".join(PIPELINE_TOKENS)
        )
    if strategy not in STRATEGIES:
        raise ConfigError(
            f"unknown strategy {strategy!r}; expected one of " + ", ".join(STRATEGIES)
        )
    if pipeline_tok.startswith("feature-"):
        return "feature", pipeline_tok.split("-", 1)[1], strategy
    return pipeline_tok, "sum", strategy


def _find_line(text: str, section: str | None, key: str) -> int | None:
    current = None
    for no, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^]\s]+)\]", line)
        if m:
            current = m.group(1)
            continue
        if current == section and re.match(rf"\s*{re.escape(key)}\s*=", line):
            return no
    return None


class _Anchors:
    """Formats 'where did this key come from' for error messages."""

    def __init__(self, path: str | None, text: str):
        self.path, self.text = path, text

    def at(self, section: str | None, key: str) -> str:
        if self.path is None:
            return key if section is None else f"[{section}] {key}"
        line = _find_line(self.text, section, key)
        where = f"{self.path}:{line}" if line else self.path
        name = key if section is None else f"[{section}] {key}"
        return f"{where}: {name}"


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{where}: expected a non-empty list, got {value!r}")
        return [_coerce(v, default[0], where) for v in value]
    raise AssertionError(f"unhandled default type for {where}")


def _apply_file(merged, path: str, anchors: _Anchors) -> None:
    try:
        parsed = tomllib.loads(anchors.text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    for key, value in parsed.items():
        if key in _TOP_LEVEL:
            merged["run"][key] = _coerce(value, _TOP_LEVEL[key], anchors.at(None, key))
        elif key in _DEFAULTS:
            if not isinstance(value, dict):
                raise ConfigError(
                    f"{anchors.at(None, key)}: expected a [{key}] section"
                )
            for k, v in value.items():
                if k not in _DEFAULTS[key]:
                    raise ConfigError(f"{anchors.at(key, k)}: unknown key")
                merged[key][k] = _coerce(v, _DEFAULTS[key][k], anchors.at(key, k))
        else:
            raise ConfigError(f"{anchors.at(None, key)}: unknown key")


def _apply_env(merged, env) -> None:
    for name in sorted(env):
        if not name.startswith("COOPSIM_"):
            continue
        where = f"environment variable {name}"
        rest = name[len("COOPSIM_"):]
        if rest.lower() in _TOP_LEVEL:
            section, key, default = "run", rest.lower(), _TOP_LEVEL[rest.lower()]
        else:
            sec, _, tail = rest.partition("_")
            section, key = sec.lower(), tail.lower()
            if section not in _DEFAULTS or key not in _DEFAULTS[section]:
                raise ConfigError(f"{where}: unknown key")
            default = _DEFAULTS[section][key]
        try:
            value = tomllib.loads(f"v = {env[name]}")["v"]
        except tomllib.TOMLDecodeError:
            value = env[name]  # bare strings need no quotes
        merged[section][key] = _coerce(value, default, where)


def _validate(merged, anchors: _Anchors) -> None:
    def bad(section, key, why):
        raise ConfigError(f"{anchors.at(section, key)}: {why}")

    positive = [
        ("world", "width_m"), ("world", "length_m"), ("world", "placement_retries"),
        ("lidar", "azimuth_step_deg"), ("lidar", "beams"), ("lidar", "range_m"),
        ("grid", "resolution_px"), ("grid", "half_range_m"), ("grid", "saturation"),
        ("network", "widths_divisor"), ("training", "epochs"),
        ("training", "learning_rate"), ("training", "batch_size"),
        ("training", "pair_radius_m"), ("dataset", "train_frames"),
        ("dataset", "test_frames"), ("sweep", "radius_m"),
    ]
    for section, key in positive:
        if merged[section][key] <= 0:
            bad(section, key, "must be positive")
    non_negative = [
        ("world", "vehicles"), ("world", "pedestrians"), ("world", "occluders"),
        ("world", "lidar_vehicles"), ("network", "encoder_pools"),
        ("training", "momentum"), ("eval", "n_coop"), ("sweep", "n_coop"),
    ]
    for section, key in non_negative:
        if merged[section][key] < 0:
            bad(section, key, "must not be negative")
    if merged["world"]["lidar_vehicles"] > merged["world"]["vehicles"]:
        bad("world", "lidar_vehicles", "cannot exceed the vehicle count")
    if merged["training"]["strategy"] not in STRATEGIES:
        bad("training", "strategy", "expected one of " + ", ".join(STRATEGIES))
    if merged["training"]["aggregation"] not in AGGREGATION_MODES:
        bad(
            "training", "aggregation",
            "expected one of " + ", ".join(AGGREGATION_MODES),
        )
    if len(merged["training"]["decay_at"]) != 2:
        bad("training", "decay_at", "expected two epoch fractions")
    if not 0.0 < merged["eval"]["conf_threshold"] < 1.0:
        bad("eval", "conf_threshold", "must lie strictly between 0 and 1")
    for token in merged["eval"]["methods"]:
        try:
            parse_method_token(token)
        except ConfigError as exc:
            bad("eval", "methods", str(exc))
    if any(m < 0 for m in merged["sweep"]["noise_magnitudes"]):
        bad("sweep", "noise_magnitudes", "magnitudes must not be negative")
    if any(n < 0 for n in merged["sweep"]["coop_counts"]):
        bad("sweep", "coop_counts", "counts must not be negative")


def _build(merged) -> RunConfig:
    run = merged["run"]
    training = merged["training"]
    return RunConfig(
        seed=run["seed"],
        output_dir=run["output_dir"],
        world=WorldConfig(**merged["world"]),
        lidar=LidarSpec(**merged["lidar"]),
        grid=GridSpec(**merged["grid"]),
        network=NetworkScale(**merged["network"]),
        loss=LossWeights(**merged["loss"]),
        training=TrainConfig(
            strategy=training["strategy"], epochs=training["epochs"],
            learning_rate=training["learning_rate"],
            momentum=training["momentum"], batch_size=training["batch_size"],
            decay_at=tuple(training["decay_at"]),
            aggregation=training["aggregation"],
            pair_radius_m=training["pair_radius_m"],
        ),
        dataset=DatasetConfig(**merged["dataset"]),
        eval=EvalConfig(
            methods=tuple(merged["eval"]["methods"]),
            n_coop=merged["eval"]["n_coop"],
            alignment=merged["eval"]["alignment"],
            conf_threshold=merged["eval"]["conf_threshold"],
        ),
        sweep=SweepConfig(
            noise_magnitudes=tuple(merged["sweep"]["noise_magnitudes"]),
            coop_counts=tuple(merged["sweep"]["coop_counts"]),
            n_coop=merged["sweep"]["n_coop"],
            radius_m=merged["sweep"]["radius_m"],
        ),
    )


def default_config() -> RunConfig:
    return load_config(None, env={})


def load_config(path: str | None, env=None) -> RunConfig:
    """Defaults, then the file at `path` (if any), then COOPSIM_ overrides."""
    if env is None:
        env = os.environ
    merged = copy.deepcopy(_DEFAULTS)
    merged["run"] = dict(_TOP_LEVEL)
    text = ""
    if path is not None:
        try:
            with open(path, "rb") as fh:
                text = fh.read().decode("utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    anchors = _Anchors(path, text)
    if path is not None:
        _apply_file(merged, path, anchors)
    _apply_env(merged, env)
    _validate(merged, anchors)
    return _build(merged)


def config_reference() -> str:
    """Generated key reference: every key, its type, and its default."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines = ["# configuration key reference (defaults shown)", ""]
    for key, default in _TOP_LEVEL.items():
        lines.append(f"{key} = {fmt(default)}  # {_KEY_DOCS[key]}")
    for section, keys in _DEFAULTS.items():
        lines.append("")
        lines.append(f"[{section}]  # {_KEY_DOCS[section]}")
        for key, default in keys.items():
            lines.append(f"{key} = {fmt(default)}")
    return "\n".join(lines) + "\n"
