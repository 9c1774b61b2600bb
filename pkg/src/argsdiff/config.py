"""Run configuration: defaults, ``key = value`` files, environment and flag overrides."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .sampler import GUIDANCE_MODES, SamplerConfig

ENV_PREFIX = "ARGSDIFF_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # sampler
    guide_weight: float = 1.0
    refine_weight: float = 1.0
    guide_step_coeff: float = 0.05
    guide_step_basis: float = 0.05
    refine_divisor: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_div: float = 1e-8
    num_steps: int = 500
    subspace_dim: int = 8
    argm_enabled: bool = True
    guidance_mode: str = "full-backprop"
    argm_step_cap: bool = True
    # scene and degradation
    height: int = 64
    width: int = 64
    bands: int = 31
    msi_bands: int = 4
    rank: int = 8
    seed: int = 0
    scale: int = 4
    snr_db: float = 35.0
    # training
    spectral_steps: int = 2000
    spatial_steps: int = 2000
    lr: float = 1e-3
    spectral_batch: int = 8
    spatial_batch: int = 1
    patch: int = 64
    clip_norm: float = 1.0
    spatial_base: int = 16
    # output
    out: str = "out"

    def sampler(self) -> SamplerConfig:
        names = {f.name for f in fields(SamplerConfig)}
        return SamplerConfig(**{k: getattr(self, k) for k in names})

    def validate(self) -> "RunConfig":
        try:
            self.sampler()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        for name in ("height", "width", "bands", "msi_bands", "rank", "scale", "patch", "spatial_base"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("spectral_steps", "spatial_steps", "spectral_batch", "spatial_batch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.spectral_batch == 0 or self.spatial_batch == 0:
            raise ConfigError("batch sizes must be positive")
        for name in ("height", "width"):
            v = getattr(self, name)
            if v % self.scale or v % 16:
                raise ConfigError(f"{name}={v} must be divisible by scale={self.scale} and by 16")
        if self.patch % 16 or self.patch > min(self.height, self.width):
            raise ConfigError(f"patch={self.patch} must be divisible by 16 and fit the image")
        if self.msi_bands > self.bands:
            raise ConfigError("msi_bands cannot exceed bands")
        if self.rank > self.bands:
            raise ConfigError("rank cannot exceed bands")
        if not self.lr > 0 or not self.clip_norm > 0:
            raise ConfigError("lr and clip_norm must be positive")
        if math.isnan(self.snr_db):
            raise ConfigError("snr_db is NaN")
        return self


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def coerce(key: str, text) -> object:
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    if not isinstance(text, str):
        text = str(text)
    try:
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {err}") from err
    value = text.strip()
    if key == "guidance_mode":
        value = {"full": "full-backprop"}.get(value, value)
        if value not in GUIDANCE_MODES:
            raise ConfigError(f"guidance_mode must be one of {GUIDANCE_MODES}")
    return value


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            values[key] = coerce(key, value)
        except ConfigError as err:
            raise ConfigError(f"{source}:{lineno}: {err}") from err
    return values


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    values = {}
    for key in FIELD_TYPES:
        for name in (ENV_PREFIX + key, ENV_PREFIX + key.upper()):
            if name in environ:
                values[key] = coerce(key, environ[name])
                break
    return values


def load_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Defaults, then the file, then environment variables, then explicit overrides."""
    values = {}
    if path is not None:
        values.update(parse_text(Path(path).read_text(), str(path)))
    values.update(env_overrides(environ))
    for key, value in (overrides or {}).items():
        values[key] = coerce(key, value)
    return replace(RunConfig(), **values).validate()


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))
