"""Run configuration: a TOML file plus ``--section.key value`` overrides.

Schema (every key optional)::

    env = "treasureshop"          # or "chainqa"
    output_dir = "runs/default"
    workers = 1

    [splits]                      # half-open task-seed ranges, must be disjoint
    train = [0, 250]
    validation = [1000, 1100]
    test = [2000, 2100]

    [agent]                       # proposer used for search and evaluation
    kind = "scripted"             # scripted | featurized | remote
    epsilon = 0.5                 # scripted: probability of a random action
    weights = ""                  # featurized: policy JSON ("" = zero weights)
    base_url = ""                 # remote
    model = ""                    # remote

    [mcts]                        # m, n, eta, temperature, max_depth,
    m = 30                        # penalty_reward, seed, early_stop,
                                  # full_expansion
    [dpo]                         # learning_rate (alias lr), batch_size,
    learning_rate = 1e-5          # warmup_ratio, epochs, seed, optimizer,
                                  # beta, level
    [evaluate]
    strategies = ["greedy", "q_guided"]
    n_values = [5]
    seed = 0
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import tomli

from qsteer.dpo import TrainConfig
from qsteer.env import ENV_KINDS, TREASURE_SHOP
from qsteer.mcts import SearchConfig

ALIASES = {("dpo", "lr"): ("dpo", "learning_rate")}


class ConfigError(ValueError):
    pass


@dataclass
class Splits:
    train: tuple[int, int] = (0, 250)
    validation: tuple[int, int] = (1000, 1100)
    test: tuple[int, int] = (2000, 2100)

    def seeds(self, name: str) -> list[int]:
        lo, hi = getattr(self, name)
        return list(range(lo, hi))

    def validate(self) -> "Splits":
        ranges = {k: tuple(getattr(self, k)) for k in ("train", "validation", "test")}
        for k, (lo, hi) in ranges.items():
            if not 0 <= lo <= hi:
                raise ConfigError(f"split {k} must satisfy 0 <= start <= end, got {[lo, hi]}")
        names = list(ranges)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                (a0, a1), (b0, b1) = ranges[a], ranges[b]
                if max(a0, b0) < min(a1, b1):
                    raise ConfigError(f"splits {a} and {b} overlap")
        return self


@dataclass
class AgentConfig:
    kind: str = "scripted"
    epsilon: float = 0.5
    weights: str = ""
    base_url: str = ""
    model: str = ""

    def validate(self) -> "AgentConfig":
        if self.kind not in ("scripted", "featurized", "remote"):
            raise ConfigError(f"unknown agent kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("agent.epsilon must be in [0, 1]")
        if self.kind == "remote" and not (self.base_url and self.model):
            raise ConfigError("remote agent needs agent.base_url and agent.model")
        return self


@dataclass
class EvalConfig:
    strategies: list[str] = field(default_factory=lambda: ["greedy", "q_guided"])
    n_values: list[int] = field(default_factory=lambda: [5])
    seed: int = 0


@dataclass
class RunConfig:
    env: str = TREASURE_SHOP
    output_dir: str = "runs/default"
    workers: int = 1
    splits: Splits = field(default_factory=Splits)
    agent: AgentConfig = field(default_factory=AgentConfig)
    mcts: SearchConfig = field(default_factory=SearchConfig)
    dpo: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def validate(self) -> "RunConfig":
        if self.env not in ENV_KINDS:
            raise ConfigError(f"unknown env {self.env!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.splits.validate()
        self.agent.validate()
        try:
            self.mcts.validate()
            self.dpo.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if not self.evaluate.n_values or any(n < 1 for n in self.evaluate.n_values):
            raise ConfigError("evaluate.n_values must be non-empty and >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = ("splits", "agent", "mcts", "dpo", "evaluate")


def _coerce(value: Any, like: Any, where: str) -> Any:
    """Convert ``value`` (TOML value or CLI string) to the type of the default ``like``."""
    if isinstance(value, str) and not isinstance(like, str):
        text = value.strip()
        if isinstance(like, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        if isinstance(like, (list, tuple)):
            parts = [p for p in text.strip("[]()").split(",") if p.strip()]
            elem = like[0] if like else ""
            return type(like)(_coerce(p.strip().strip("\"'"), elem, where) for p in parts)
        if like is None and text.lower() in ("", "none"):
            return None
        try:
            x = float(text)
        except ValueError:
            raise ConfigError(f"{where}: cannot parse {value!r}") from None
        if isinstance(like, float):
            return x
        if x != int(x):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(x)
    if isinstance(like, bool) != isinstance(value, bool):
        raise ConfigError(f"{where}: expected {'a boolean' if isinstance(like, bool) else type(like).__name__}")
    if isinstance(like, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(like, int) and not isinstance(like, bool) and not isinstance(value, int):
        raise ConfigError(f"{where}: expected an integer")
    if isinstance(like, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    if isinstance(like, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def _set(cfg: RunConfig, section: Optional[str], key: str, value: Any) -> None:
    if section is not None:
        section, key = ALIASES.get((section, key), (section, key))
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, section)
    else:
        target = cfg
    names = {f.name for f in dataclasses.fields(target)}
    if key not in names or (section is None and key in _SECTIONS):
        where = f"{section}.{key}" if section else key
        raise ConfigError(f"unknown config key {where!r}")
    current = getattr(target, key)
    setattr(target, key, _coerce(value, current, f"{section}.{key}" if section else key))


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomli.load(fh)
        except (OSError, tomli.TOMLDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        for key, value in raw.items():
            if isinstance(value, dict):
                for k, v in value.items():
                    _set(cfg, key, k, v)
            else:
                _set(cfg, None, key, value)
    apply_overrides(cfg, overrides)
    return cfg.validate()


def apply_overrides(cfg: RunConfig, overrides: Sequence[str]) -> RunConfig:
    """Apply ``["--mcts.m", "10", "--dpo.lr=1e-4", ...]`` in order."""
    items = list(overrides)
    i = 0
    while i < len(items):
        flag = items[i]
        if not flag.startswith("--"):
            raise ConfigError(f"expected --section.key, got {flag!r}")
        name = flag[2:]
        if "=" in name:
            name, value = name.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(items):
                raise ConfigError(f"missing value for {flag}")
            value = items[i + 1]
            i += 2
        section, _, key = name.rpartition(".")
        _set(cfg, section or None, key.replace("-", "_"), value)
    return cfg
