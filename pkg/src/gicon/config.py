"""Run configuration: a sectioned ``key = value`` file plus flag overrides.

Sections and keys::

    [data]   dataset path and synthetic-generator settings
    [model]  architecture (channel counts come from the dataset)
    [train]  optimizer, schedule, operator regime
    [eval]   checkpoint/index paths, dts, counts, selection, noise
    [run]    out_dir, seed

Lists are comma-separated (``counts = 0,1,2,5``). Precedence is
flags > file > defaults; unknown keys and bad values are rejected with the
offending key named.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, get_type_hints

from .evaluation import EvalSpec
from .model import ModelConfig
from .synth import SynthSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


# (section, dataclass, keys hidden from the file, extra path-like keys)
_SECTIONS = {
    "data": (SynthSpec, {"seed"}, {"dataset": ""}),
    "model": (ModelConfig, {"in_channels", "target_channels"}, {}),
    "train": (TrainConfig, {"seed"}, {}),
    "eval": (EvalSpec, {"seed"}, {"checkpoint": "", "index": ""}),
    "run": (None, set(), {"out_dir": "", "seed": None}),
}


def _field_types(cls) -> Dict[str, Any]:
    hints = get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def schema() -> Dict[str, Dict[str, Tuple[Any, Any]]]:
    """section -> key -> (type, default)."""
    out = {}
    for section, (cls, hidden, extra) in _SECTIONS.items():
        keys = {}
        for name, default in extra.items():
            keys[name] = (int if name == "seed" else str, default)
        if cls is not None:
            types = _field_types(cls)
            for f in dataclasses.fields(cls):
                if f.name in hidden:
                    continue
                default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
                keys[f.name] = (types[f.name], default)
        out[section] = keys
    return out


def _is_list(tp) -> bool:
    return getattr(tp, "__origin__", None) in (list, List, tuple, Tuple)


def coerce(section: str, key: str, tp, raw: Any):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if _is_list(tp):
            return [int(x) for x in text.split(",") if x.strip()]
        if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
            text = text[1:-1]
        return text
    except ValueError:
        name = getattr(tp, "__name__", None) or str(tp)
        raise ConfigError(f"[{section}] {key}: expected {name}, got {raw.strip()!r}") from None


@dataclass
class RunConfig:
    values: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def seed(self) -> Optional[int]:
        return self.values["run"]["seed"]

    def synth_spec(self) -> SynthSpec:
        kw = {k: v for k, v in self.values["data"].items() if k != "dataset"}
        return SynthSpec(**kw, seed=self.seed if self.seed is not None else 0)

    def model_config(self, in_channels: int, target_channels) -> ModelConfig:
        return ModelConfig(**self.values["model"], in_channels=in_channels, target_channels=tuple(target_channels))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.values["train"], seed=self.seed if self.seed is not None else 0)

    def eval_spec(self) -> EvalSpec:
        kw = {k: v for k, v in self.values["eval"].items() if k not in ("checkpoint", "index")}
        return EvalSpec(**kw, seed=self.seed if self.seed is not None else 0)

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section, keys in self.values.items():
            cp[section] = {k: _render(v) for k, v in keys.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {s: dict(v) for s, v in self.values.items()}


def _render(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_config(path: Optional[str] = None, overrides: Optional[Dict[Tuple[str, str], Any]] = None,
                 text: Optional[str] = None) -> RunConfig:
    sch = schema()
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in sch.items()}

    def put(section, key, raw):
        if section not in sch:
            raise ConfigError(f"unknown section [{section}]")
        if key not in sch[section]:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        tp, _ = sch[section][key]
        if key == "seed" and isinstance(raw, str) and raw.strip() == "":
            values[section][key] = None
            return
        values[section][key] = coerce(section, key, tp, raw)

    if path is not None or text is not None:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            if text is None:
                with open(path) as fh:
                    text = fh.read()
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from None
        for section in cp.sections():
            for key, raw in cp[section].items():
                put(section, key, raw)
    for (section, key), raw in (overrides or {}).items():
        if raw is not None:
            put(section, key, raw)

    cfg = RunConfig(values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    checks = [
        ("data", cfg.synth_spec),
        ("model", lambda: cfg.model_config(13, (11, 12))),
        ("train", cfg.train_config),
        ("eval", cfg.eval_spec),
    ]
    for section, build in checks:
        try:
            build()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None
