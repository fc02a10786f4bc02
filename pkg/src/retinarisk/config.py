"""Run configuration: presets, file parsing (INI-style or JSON), validation."""

from __future__ import annotations

import configparser
import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .fusion import ModelConfig, desk_config, paper_config
from .numerics import ConfigurationError, OptimConfig
from .preprocess import PreprocessConfig
from .training import LossConfig, TrainConfig

SEED_ENV = "TPRS_SEED"
PRESETS = ("desk-scale", "paper-scale")
# model keys that may be overridden from a config file
MODEL_KEYS = ("use_vit", "use_gnn", "dropout", "dtype")


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk-scale"
    model: ModelConfig = field(default_factory=desk_config)
    preprocess: PreprocessConfig = PreprocessConfig(target_size=32)
    train: TrainConfig = TrainConfig()
    loss: LossConfig = LossConfig()
    optim: OptimConfig = OptimConfig()
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.preprocess.target_size != self.model.image_size:
            raise ConfigurationError(
                f"preprocess target_size {self.preprocess.target_size} != model input {self.model.image_size}")

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "preprocess": dataclasses.asdict(self.preprocess),
            "train": dataclasses.asdict(self.train),
            "loss": dataclasses.asdict(self.loss),
            "optim": dataclasses.asdict(self.optim),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(preset=d["preset"], seed=int(d["seed"]), model=ModelConfig.from_dict(d["model"]),
                   preprocess=_build(PreprocessConfig, d["preprocess"], "preprocess"),
                   train=_build(TrainConfig, d["train"], "train"), loss=_build(LossConfig, d["loss"], "loss"),
                   optim=_build(OptimConfig, d["optim"], "optim"))


def _coerce(value, annotation, where: str):
    """Convert parsed text/JSON to the field's declared type."""
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if annotation is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "yes", "1", "on", "false", "no", "0", "off"):
            return value.lower() in ("true", "yes", "1", "on")
        if value in (0, 1):
            return bool(value)
        raise ConfigurationError(f"{where}: expected a boolean, got {value!r}")
    if annotation is int:
        try:
            whole = not isinstance(value, bool) and float(value).is_integer()
        except (TypeError, ValueError):
            whole = False
        if not whole:
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return int(float(value))
    if annotation is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}") from None
    if annotation is str:
        return str(value)
    if origin is tuple:
        if isinstance(value, str):
            value = [v for v in value.replace("(", "").replace(")", "").split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where}: expected a list, got {value!r}")
        inner = args[0] if args else float
        return tuple(_coerce(v, inner, where) for v in value)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "")):
            return None
        non_none = [a for a in args if a is not type(None)]
        return _coerce(value, non_none[0], where)
    return value


def _build(cls, values: dict, section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigurationError(f"[{section}] unknown keys: {sorted(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"[{section}] {k}") for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[{section}] {exc}") from None


def _parse_ini_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip()


def read_config_file(path: str | os.PathLike) -> dict[str, dict]:
    """Sections of key/value pairs, from JSON or an INI-style file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        out = {}
        for k, v in data.items():
            if isinstance(v, dict):
                out[k] = v
            else:
                out.setdefault("run", {})[k] = v
        return out
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    out = {s: {k: _parse_ini_value(v) for k, v in parser.items(s)} for s in parser.sections()}
    if parser.defaults():
        raise ConfigurationError(f"{path}: keys outside a section are not allowed")
    return out


SECTIONS = ("run", "model", "preprocess", "train", "loss", "optim")


def resolve_config(sections: dict[str, dict] | None = None, env: dict | None = None) -> RunConfig:
    """Preset defaults, then file values, then the ``TPRS_SEED`` environment override."""
    sections = sections or {}
    env = os.environ if env is None else env
    unknown = set(sections) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown sections: {sorted(unknown)}")
    run = dict(sections.get("run", {}))
    bad = set(run) - {"preset", "seed"}
    if bad:
        raise ConfigurationError(f"[run] unknown keys: {sorted(bad)}")
    preset = str(run.get("preset", "desk-scale"))
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {PRESETS}")
    seed = _coerce(run.get("seed", 0), int, "[run] seed")
    if env.get(SEED_ENV, "") != "":
        seed = _coerce(env[SEED_ENV], int, SEED_ENV)
    model_vals = dict(sections.get("model", {}))
    bad = set(model_vals) - set(MODEL_KEYS)
    if bad:
        raise ConfigurationError(f"[model] unknown keys: {sorted(bad)}")
    hints = typing.get_type_hints(ModelConfig)
    overrides = {k: _coerce(v, hints[k], f"[model] {k}") for k, v in model_vals.items()}
    base = desk_config() if preset == "desk-scale" else paper_config()
    try:
        model = dataclasses.replace(base, **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[model] {exc}") from None
    pre_vals = {"target_size": model.image_size, **sections.get("preprocess", {})}
    train_vals = {"seed": seed, **sections.get("train", {})}
    train_vals["seed"] = seed
    return RunConfig(preset=preset, model=model,
                     preprocess=_build(PreprocessConfig, pre_vals, "preprocess"),
                     train=_build(TrainConfig, train_vals, "train"),
                     loss=_build(LossConfig, sections.get("loss", {}), "loss"),
                     optim=_build(OptimConfig, sections.get("optim", {}), "optim"),
                     seed=seed)


def load_run_config(path: str | os.PathLike | None = None, env: dict | None = None) -> RunConfig:
    return resolve_config(read_config_file(path) if path is not None else {}, env)
