"""Sectioned key=value run configuration with typed defaults.

Every key has a default; unknown sections or keys are rejected. Each
pipeline stage hashes the sections it depends on, so artifacts from
different settings never share a directory.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .advantage import AdvantageConfig
from .envs.maze import CollectorConfig, MazeSpec, desk_maze, load_maze, large_maze
from .pretrain import PretrainConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "runs"


@dataclass(frozen=True)
class MazeSection:
    layout: str = "desk"              # desk | large | path to a text grid
    max_episode_steps: int = 0        # 0 keeps the layout's own cap


@dataclass(frozen=True)
class DataSection:
    trajectory_count: int = 300
    route_left: float = 0.33
    route_middle: float = 0.22
    route_right: float = 0.45
    normalize_states: bool = False
    export_jsonl: bool = False


@dataclass(frozen=True)
class EvalSection:
    episodes: int = 100
    export_trajectories: bool = True


@dataclass(frozen=True)
class StatsSection:
    advantage_states: int = 1000
    kappas: tuple = (0.55, 0.65, 0.75, 0.85, 0.95)


@dataclass(frozen=True)
class VerifySection:
    trial_count: int = 200


SECTIONS = {
    "run": RunSection,
    "maze": MazeSection,
    "data": DataSection,
    "collector": CollectorConfig,
    "pretrain": PretrainConfig,
    "advantage": AdvantageConfig,
    "train": TrainConfig,
    "eval": EvalSection,
    "stats": StatsSection,
    "verify": VerifySection,
}

# sections each stage's artifacts depend on
STAGE_SECTIONS = {
    "data": ("run", "maze", "data", "collector"),
    "pretrain": ("run", "maze", "data", "collector", "pretrain"),
    "train": ("run", "maze", "data", "collector", "pretrain", "advantage", "train"),
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    maze: MazeSection = field(default_factory=MazeSection)
    data: DataSection = field(default_factory=DataSection)
    collector: CollectorConfig = field(default_factory=CollectorConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    advantage: AdvantageConfig = field(default_factory=AdvantageConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    stats: StatsSection = field(default_factory=StatsSection)
    verify: VerifySection = field(default_factory=VerifySection)
    ablate_advantage: bool = False

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       ablate: bool | None = None) -> "RunConfig":
        run = self.run
        if seed is not None:
            run = dataclasses.replace(run, seed=seed)
        if out is not None:
            run = dataclasses.replace(run, out=out)
        cfg = dataclasses.replace(self, run=run, train=dataclasses.replace(self.train, seed=run.seed))
        if ablate is not None:
            cfg = dataclasses.replace(cfg, ablate_advantage=ablate)
        return cfg

    def maze_spec(self) -> MazeSpec:
        name = self.maze.layout
        kw = {"max_episode_steps": self.maze.max_episode_steps} if self.maze.max_episode_steps else {}
        if name == "desk":
            return desk_maze(**kw)
        if name == "large":
            return large_maze(**kw)
        return load_maze(name, **kw)

    def route_mix(self) -> dict:
        d = self.data
        return {"left": d.route_left, "middle": d.route_middle, "right": d.route_right}

    def render(self, sections=None) -> str:
        """Resolved config text (defaults filled) for the given sections."""
        lines = []
        for name in sections or SECTIONS:
            lines.append(f"[{name}]")
            obj = getattr(self, name)
            for f in fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            if name == "train":
                lines.append(f"ablate_advantage = {_format(self.ablate_advantage)}")
            lines.append("")
        return "\n".join(lines)

    def stage_hash(self, stage: str) -> str:
        return hashlib.sha256(self.render(STAGE_SECTIONS[stage]).encode()).hexdigest()[:12]

    def stage_dir(self, stage: str) -> Path:
        return Path(self.run.out) / f"{stage}-{self.stage_hash(stage)}"


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    built = {}
    ablate = False
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        cls = SECTIONS[section]
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        values = {}
        for key, raw in parser.items(section):
            if section == "train" and key == "ablate_advantage":
                ablate = _parse(raw, False, f"{source} [train] ablate_advantage")
                continue
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[key] = _parse(raw, getattr(defaults, key), f"{source} [{section}] {key}")
        try:
            built[section] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source} [{section}]: {exc}") from None
    cfg = RunConfig(**built, ablate_advantage=ablate)
    return cfg.with_overrides()


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig().with_overrides()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))
