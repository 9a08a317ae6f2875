"""Run configuration: INI-style ``key = value`` text with one section per component.

Every key of every section must be present when loading; unknown keys are
rejected too, so a config file always describes the whole run.  ``none``
spells an unset optional value and tuples are comma separated.
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field

from lobit.qat import TrainConfig
from lobit.sensitivity import PlannerConfig
from lobit.toydiff.model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 1024
    out_dir: str = "runs/default"


@dataclass
class DataConfig:
    n_classes: int = 8
    std: float = 0.05


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012


@dataclass
class TeacherConfig:
    iters: int = 2000
    lr: float = 1e-3
    batch: int = 256
    eval_every: int = 500


@dataclass
class EvalConfig:
    samples: int = 512
    steps: int = 50
    guidance: float = 7.5
    cfg_scales: tuple[float, ...] = (2.5, 3.5, 4.5, 5.5, 6.5, 7.5, 8.5, 9.5)
    psnr_range: float = 2.0


def _toy_train() -> TrainConfig:
    # the published learning rate is far too small for a model this size
    return TrainConfig(lr=2e-4, iters_stage1=1000, iters_stage2=300)


def _toy_planner() -> PlannerConfig:
    return PlannerConfig(target_avg_bits=2.0)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    train: TrainConfig = field(default_factory=_toy_train)
    planner: PlannerConfig = field(default_factory=_toy_planner)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def seed(self) -> int:
        return self.run.seed


# TrainConfig.seed is derived from the run seed, never written
_SKIP = {"train": {"seed"}}


def _section_fields(name, obj):
    return [f for f in dataclasses.fields(obj) if f.name not in _SKIP.get(name, ())]


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(text: str, kind, where: str):
    text = text.strip()
    origin = typing.get_origin(kind)
    try:
        if origin in (typing.Union, types.UnionType):
            inner = [a for a in typing.get_args(kind) if a is not type(None)]
            return None if text.lower() == "none" else _parse(text, inner[0], where)
        if origin is tuple:
            elem = typing.get_args(kind)[0]
            return tuple(_parse(p, elem, where) for p in text.split(",") if p.strip())
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true or false, got {text!r}")
            return low == "true"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def to_text(cfg: RunConfig) -> str:
    lines = []
    for sec in dataclasses.fields(cfg):
        obj = getattr(cfg, sec.name)
        lines.append(f"[{sec.name}]")
        for f in _section_fields(sec.name, obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def from_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive (schedule.T)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    sections = {}
    known = set()
    for sec in dataclasses.fields(RunConfig):
        cls = type(sec.default_factory())
        known.add(sec.name)
        if not parser.has_section(sec.name):
            raise ConfigError(f"missing section [{sec.name}]")
        hints = typing.get_type_hints(cls)
        body = parser[sec.name]
        kwargs = {}
        names = {f.name for f in _section_fields(sec.name, cls)}
        for name in names:
            if name not in body:
                raise ConfigError(f"missing key {sec.name}.{name}")
            kwargs[name] = _parse(body[name], hints[name], f"{sec.name}.{name}")
        extra = sorted(set(body) - names)
        if extra:
            raise ConfigError(f"unknown key {sec.name}.{extra[0]}")
        try:
            sections[sec.name] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{sec.name}] {exc}") from None
    extra = sorted(set(parser.sections()) - known)
    if extra:
        raise ConfigError(f"unknown section [{extra[0]}]")
    cfg = RunConfig(**sections)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if cfg.model.n_classes != cfg.data.n_classes:
        raise ConfigError("model.n_classes must equal data.n_classes")
    if cfg.model.data_dim != 2:
        raise ConfigError("model.data_dim must be 2 for the toy data")
    if cfg.model.emb_dim % 2:
        raise ConfigError("model.emb_dim must be even")
    if not 1 <= cfg.eval.steps <= cfg.schedule.T:
        raise ConfigError(f"eval.steps must be in [1, {cfg.schedule.T}]")
    if cfg.eval.samples < 1 or cfg.planner.eval_samples < 1:
        raise ConfigError("sample counts must be positive")
    if any(w < 1 for w in (*cfg.eval.cfg_scales, cfg.eval.guidance, cfg.planner.guidance)):
        raise ConfigError("guidance scales must be >= 1")
    if min(cfg.teacher.iters, cfg.train.iters_stage1, cfg.train.iters_stage2, cfg.planner.qat_iters) < 0:
        raise ConfigError("iteration counts must be >= 0")
    if min(cfg.train.eval_every, cfg.teacher.eval_every, cfg.train.batch, cfg.teacher.batch) < 1:
        raise ConfigError("batch sizes and eval intervals must be >= 1")


def load(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return from_text(text)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, seed=seed))
