"""Experiment configuration as flat ``section.key = value`` text.

Lines starting with ``#`` are comments.  Values are typed by the field they
set: bools accept true/false, tuples and lists are comma-separated.
``parse(serialize(cfg)) == cfg`` holds for every valid config.
"""

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .base import BaseOperatorSpec, EllipticProblem
from .data import DataSpec
from .errors import ConfigError
from .losses import LossWeights
from .refine import RefineConfig
from .train import TrainConfig


@dataclass(frozen=True)
class DiagnosticsConfig:
    monotonicity: bool = True
    bias_error: bool = True
    band_ratios: bool = True
    recursion_fit: bool = True
    step_size_sweep: tuple = (0.05, 0.2, 0.6)
    sample_stride: int = 1
    bias_steps: int = 24

    def __post_init__(self):
        if any(not 0.0 < a <= 1.0 for a in self.step_size_sweep):
            raise ConfigError("step_size_sweep entries must lie in (0, 1]")
        if self.sample_stride < 1 or self.bias_steps < 1:
            raise ConfigError("sample_stride and bias_steps must be >= 1")


SECTIONS = {
    "problem": EllipticProblem,
    "data": DataSpec,
    "base": BaseOperatorSpec,
    "train": TrainConfig,
    "losses": LossWeights,
    "refine": RefineConfig,
    "diagnostics": DiagnosticsConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    problem: EllipticProblem = field(default_factory=EllipticProblem)
    data: DataSpec = field(default_factory=DataSpec)
    base: BaseOperatorSpec = field(default_factory=BaseOperatorSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    refine: RefineConfig = field(default_factory=RefineConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    output_dir: str = "runs/default"

    def replace(self, **overrides):
        """Copy with dotted-key overrides, e.g. ``replace(**{"train.lr": 1e-3})``."""
        return apply_overrides(self, overrides)

    def digest(self):
        return hashlib.sha256(serialize(self, comments=False).encode()).hexdigest()


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(text, default, key):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if not text:
                return ()
            kind = type(default[0]) if default else float
            return tuple(kind(v.strip()) for v in text.split(","))
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def apply_overrides(cfg, overrides):
    """New config with ``{"section.key": value}`` overrides; values may be strings."""
    sections = {name: {} for name in SECTIONS}
    top = {}
    for key, value in overrides.items():
        if key == "output_dir":
            top["output_dir"] = str(value)
            continue
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(cfg, sec)
        if name not in {f.name for f in dataclasses.fields(current)}:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(current, name)
        if isinstance(value, str) and not isinstance(default, str):
            value = _convert(value, default, key)
        sections[sec][name] = value
    try:
        new = {sec: dataclasses.replace(getattr(cfg, sec), **vals) for sec, vals in sections.items() if vals}
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return dataclasses.replace(cfg, **new, **top)


def parse(text):
    """Config from key=value text; unspecified keys keep their defaults."""
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        overrides[key] = value.strip()
    return apply_overrides(ExperimentConfig(), overrides)


def serialize(cfg, comments=True):
    lines = ["# refinement experiment configuration"] if comments else []
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        if comments:
            lines.append(f"\n# {sec}")
        for f in dataclasses.fields(obj):
            lines.append(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}")
    lines.append(f"output_dir = {cfg.output_dir}")
    return "\n".join(lines) + "\n"


def load_config(path):
    with open(path) as fh:
        return parse(fh.read())


def save_config(cfg, path):
    with open(path, "w") as fh:
        fh.write(serialize(cfg))
