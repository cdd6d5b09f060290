"""Flat ``section.key = value`` configuration.

Files hold one assignment per line; ``#`` starts a comment.  Values are
parsed according to the type of the field's default, so unknown keys and
malformed values are rejected with a message naming the key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .guide import GuideConfig
from .sac import SACConfig


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    suite: str = ""
    n_tasks: int = 4
    grid_size: int = 9
    skill_graph: str = "prefix-chain"
    variation: str = "gravity-scale"
    episode_length: int = 0  # 0 -> suite default (100 GridSkills, 200 PointMass)


@dataclass
class ReplayConfig:
    capacity: int = 100_000
    min_fill_before_training: int = 500


@dataclass
class TrainConfig:
    mode: str = "ctpg"
    total_steps_per_task: int = 20_000
    epoch_episodes: int = 10
    maskout_threshold: float = 3e3
    loss_rescale: bool = True
    eval_every: int = 2000
    eval_episodes: int = 32
    seed: int = 0
    bpt_every: int = 10
    bpt_eval_episodes: int = 5
    max_skipped_updates: int = 200  # consecutive all-masked control updates before giving up


@dataclass
class AblateConfig:
    block_metric: str = "temperature"
    success_block_threshold: float = 0.8


@dataclass
class Config:
    env: EnvConfig = field(default_factory=EnvConfig)
    sac: SACConfig = field(default_factory=SACConfig)
    guide: GuideConfig = field(default_factory=GuideConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def set(self, key: str, raw: str) -> None:
        section, _, name = key.strip().partition(".")
        sect = getattr(self, section, None) if section in SECTIONS else None
        if sect is None or not name or name not in {f.name for f in dataclasses.fields(sect)}:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(sect, name)
        try:
            setattr(sect, name, _parse(raw.strip(), current))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None

    def items(self):
        for section in SECTIONS:
            sect = getattr(self, section)
            for f in dataclasses.fields(sect):
                yield f"{section}.{f.name}", getattr(sect, f.name)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def validate(self) -> None:
        if self.env.suite not in ("gridskills", "pointmass"):
            raise ConfigError("env.suite must be set to gridskills or pointmass"
                              if not self.env.suite else f"env.suite: unknown suite {self.env.suite!r}")
        if self.train.mode not in ("base", "ctpg", "bpt"):
            raise ConfigError(f"train.mode: unknown mode {self.train.mode!r}")
        if self.ablate.block_metric not in ("temperature", "success_rate"):
            raise ConfigError(f"ablate.block_metric: unknown metric {self.ablate.block_metric!r}")
        if self.guide.k < 1:
            raise ConfigError("guide.k must be >= 1")
        if self.train.eval_every <= 0 or self.train.eval_episodes < 1:
            raise ConfigError("train.eval_every and train.eval_episodes must be positive")
        if self.train.max_skipped_updates < 1:
            raise ConfigError("train.max_skipped_updates must be >= 1")


SECTIONS = ("env", "sac", "guide", "replay", "train", "ablate")


def _parse(raw: str, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    return raw


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_text(text: str, config: Config | None = None) -> Config:
    config = config or Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, _, value = line.partition("=")
        config.set(key, value)
    return config


def load(path, overrides: list[str] | tuple = ()) -> Config:
    config = parse_text(Path(path).read_text())
    apply_overrides(config, overrides)
    config.validate()
    return config


def apply_overrides(config: Config, overrides) -> Config:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, _, value = item.partition("=")
        config.set(key, value)
    return config
