"""TOML configuration for the CLI, with flag and environment overrides.

Precedence, lowest to highest: built-in defaults, the config file (from
``--config`` or the HAVC_CONFIG environment variable), then command-line
flags.  Unknown keys in a config file are rejected rather than ignored.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigError, ValidationError
from .guidance import EntropyParams, FusionParams, GuidanceParams
from .spatial import BoxParams
from .synth import ScenarioSpec
from .tensor_store import HeadId

CONFIG_ENV_VAR = "HAVC_CONFIG"


@dataclass(frozen=True)
class RunConfig:
    """Flat view of every tunable the CLI exposes."""

    score_threshold: float = 0.5
    per_layer: bool = False
    alpha: float = 0.4
    top_k: int = 8
    temperature: float = 0.1
    entropy_threshold: float = 0.3
    component_weight: float = 0.25
    dispersion_weight: float = 0.75
    norm_scope: str = "survivors"
    otsu_bins: int = 256
    connectivity: int = 8
    box_threshold: float = 0.5
    box_pad: int = 1
    box_min_side: int = 2

    def guidance_params(self) -> GuidanceParams:
        params = GuidanceParams(
            entropy=EntropyParams(
                component_weight=self.component_weight,
                dispersion_weight=self.dispersion_weight,
                threshold=self.entropy_threshold,
            ),
            fusion=FusionParams(
                alpha=self.alpha,
                top_k=self.top_k,
                temperature=self.temperature,
                norm_scope=self.norm_scope,
            ),
            box=BoxParams(
                threshold=self.box_threshold,
                pad=self.box_pad,
                min_side=self.box_min_side,
            ),
            otsu_bins=self.otsu_bins,
            connectivity=self.connectivity,
        )
        try:
            return params.validated()
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, value, target: str):
    if target == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"config key {name!r} must be a boolean")
        return value
    if target == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {name!r} must be an integer")
        return value
    if target == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {name!r} must be a number")
        return float(value)
    if target == "str":
        if not isinstance(value, str):
            raise ConfigError(f"config key {name!r} must be a string")
        return value
    raise ConfigError(f"config key {name!r} has unsupported type")


def _load_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc


def load_config(path: str | Path | None = None) -> RunConfig:
    """Build a config from defaults, then a file if one is given or set.

    With ``path`` None, the HAVC_CONFIG environment variable is consulted;
    if that is unset too, pure defaults are returned.
    """
    if path is None:
        env = os.environ.get(CONFIG_ENV_VAR)
        if not env:
            return RunConfig()
        path = env
    doc = _load_toml(Path(path))
    unknown = set(doc) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    kwargs = {k: _coerce(k, v, _FIELD_TYPES[k]) for k, v in doc.items()}
    return RunConfig(**kwargs)


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Layer non-None override values (typically CLI flags) onto a config."""
    values = {k: v for k, v in overrides.items() if v is not None}
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config overrides {sorted(unknown)}")
    return replace(config, **values)


_SCENARIO_KEYS = {
    "grid_side",
    "n_layers",
    "n_heads",
    "planted_heads",
    "planted_region",
    "noise_level",
    "seed",
    "patch_size",
    "n_text_tokens",
    "n_special_tokens",
    "n_entropy_decoys",
    "n_gradient_decoys",
}


def load_scenario(path: str | Path) -> ScenarioSpec:
    """Read a scenario spec from TOML, rejecting unknown keys."""
    doc = _load_toml(Path(path))
    unknown = set(doc) - _SCENARIO_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown scenario keys {sorted(unknown)}")
    kwargs = dict(doc)
    if "planted_heads" in kwargs:
        try:
            kwargs["planted_heads"] = tuple(
                HeadId(int(l), int(h)) for l, h in kwargs["planted_heads"]
            )
        except (TypeError, ValueError):
            raise ConfigError(
                f"{path}: planted_heads must be a list of [layer, head] pairs"
            ) from None
    if "planted_region" in kwargs:
        region = kwargs["planted_region"]
        if not (isinstance(region, list) and len(region) == 4):
            raise ConfigError(f"{path}: planted_region must be [r0, c0, r1, c1]")
        kwargs["planted_region"] = tuple(int(v) for v in region)
    try:
        return ScenarioSpec(**kwargs).validated()
    except (TypeError, ValidationError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
