"""Run configuration: an INI-style file of flat ``key = value`` sections.

Every key has a default, so an empty file (or none) is a valid run at desk
scale: 8^3 volumes, 200 patients, five folds, 30 epochs.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticConfig
from .model import ConfigError, ModelConfig
from .training import VARIANTS, TrainConfig

DESK_MODEL = ModelConfig(input_shape=(8, 8, 8), base_channels=2, tabular_dim=8, embed_dim=16,
                         heads=4, window=2, linformer_k=8)
DESK_SYNTHETIC = SyntheticConfig(n_patients=200, volume_shape=(8, 8, 8), tabular_dim=8)
DESK_TRAINING = TrainConfig(epochs=30, batch_size=32, lr=3e-4)


@dataclass
class RunConfig:
    cohort_dir: Path = Path("cohort")
    checkpoint_dir: Path = Path("run/checkpoints")
    report_dir: Path = Path("run/reports")
    model: ModelConfig = DESK_MODEL
    synthetic: SyntheticConfig = DESK_SYNTHETIC
    training: TrainConfig = DESK_TRAINING
    ablation: str = "full"
    folds: int = 5
    min_group_frac: float = 0.1
    stratify_fold: str = "all"
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.ablation not in VARIANTS:
            raise ConfigError(f"training.ablation: unknown variant {self.ablation!r}")
        if self.folds < 2:
            raise ConfigError(f"training.folds: must be >= 2, got {self.folds}")
        if not 0.0 < self.min_group_frac < 1.0 / 3.0 + 1e-12:
            raise ConfigError(f"stratify.min_group_frac: must lie in (0, 1/3], got {self.min_group_frac}")
        if self.stratify_fold != "all" and not self.stratify_fold.isdigit():
            raise ConfigError(f"stratify.fold: expected 'all' or a fold index, got {self.stratify_fold!r}")


def _tuple(cast):
    def parse(text):
        return tuple(cast(x.strip()) for x in text.split(","))
    return parse


def _convert(section: str, key: str, text: str, default):
    try:
        if isinstance(default, bool):
            return text.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, tuple):
            return _tuple(type(default[0]))(text)
        if isinstance(default, Path):
            return Path(text)
        if default is None or isinstance(default, str):
            return text
        return type(default)(text)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {text!r}") from exc


def _section(parser, section: str, base):
    if not parser.has_section(section):
        return base
    known = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    updates = {}
    for key, text in parser.items(section):
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown key")
        updates[key] = _convert(section, key, text, known[key])
    try:
        return dataclasses.replace(base, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


_TOP_LEVEL = {
    "paths": ("cohort_dir", "checkpoint_dir", "report_dir"),
    "run": ("ablation", "folds"),
    "stratify": ("min_group_frac", "fold"),
}


def load_run_config(path: str | Path | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    source = None
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        source = str(path)
    for sec in parser.sections():
        if sec not in ("paths", "model", "synthetic", "training", "run", "stratify"):
            raise ConfigError(f"[{sec}]: unknown section")

    base = RunConfig()
    kwargs = {}
    for sec, keys in _TOP_LEVEL.items():
        if not parser.has_section(sec):
            continue
        for key, text in parser.items(sec):
            if key not in keys:
                raise ConfigError(f"{sec}.{key}: unknown key")
            attr = "stratify_fold" if (sec, key) == ("stratify", "fold") else key
            kwargs[attr] = _convert(sec, key, text, getattr(base, attr))
    kwargs["model"] = _section(parser, "model", base.model)
    kwargs["synthetic"] = _section(parser, "synthetic", base.synthetic)
    kwargs["training"] = _section(parser, "training", base.training)
    return RunConfig(**kwargs, source=source)


def render_run_config(cfg: RunConfig) -> str:
    """The fully resolved configuration in the same file format."""
    lines = ["[paths]",
             f"cohort_dir = {cfg.cohort_dir}",
             f"checkpoint_dir = {cfg.checkpoint_dir}",
             f"report_dir = {cfg.report_dir}",
             "", "[run]", f"ablation = {cfg.ablation}", f"folds = {cfg.folds}",
             "", "[stratify]", f"min_group_frac = {cfg.min_group_frac!r}", f"fold = {cfg.stratify_fold}"]
    for name in ("model", "synthetic", "training"):
        lines += ["", f"[{name}]"]
        obj = getattr(cfg, name)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
