"""Run configuration: one TOML table per component, with dotted-key overrides."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .controller import PPOConfig
from .data import FeatureConfig
from .dynamics import DynamicModelConfig
from .errors import ConfigError, ContractError
from .evaluation import EvalConfig
from .pipeline import DNNCConfig, ImaginationConfig, ImitationConfig, PipelineConfig, Variant


@dataclass
class RunSettings:
    scenario: str = "myopic-trap"
    scenario_seed: int = 0
    n_users: int = 2500
    folds: int = 5
    min_len: int = 11
    max_len: int = 200
    variants: list = field(default_factory=lambda: [v.value for v in Variant])
    critic_warmup: int = 500

    def __post_init__(self):
        bad = [v for v in self.variants if v not in {x.value for x in Variant}]
        if bad:
            raise ConfigError(f"unknown variants {bad}; choose from {[v.value for v in Variant]}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")


# dynamics' FeatureConfig lives in its own table, so it is excluded here
_TABLES = {
    "run": RunSettings,
    "features": FeatureConfig,
    "dynamics": DynamicModelConfig,
    "ppo": PPOConfig,
    "imitation": ImitationConfig,
    "imagination": ImaginationConfig,
    "dnnc": DNNCConfig,
    "eval": EvalConfig,
}
_SKIP = {"dynamics": {"features", "seed"}, "ppo": {"seed"}, "eval": {"seed"}}


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    dynamics: DynamicModelConfig = field(default_factory=DynamicModelConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    imitation: ImitationConfig = field(default_factory=ImitationConfig)
    imagination: ImaginationConfig = field(default_factory=ImaginationConfig)
    dnnc: DNNCConfig = field(default_factory=DNNCConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out = {}
        for name in _TABLES:
            obj = getattr(self, name)
            # TOML has no null, so unset optionals are left out and restored as defaults
            out[name] = {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)
                         if f.name not in _SKIP.get(name, ()) and getattr(obj, f.name) is not None}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(_TABLES)
        if unknown:
            raise ConfigError(f"unknown config tables {sorted(unknown)}; known: {sorted(_TABLES)}")
        parts = {}
        try:
            for name, typ in _TABLES.items():
                values = dict(d.get(name, {}))
                allowed = {f.name for f in fields(typ)} - _SKIP.get(name, set())
                extra = set(values) - allowed
                if extra:
                    raise ConfigError(f"[{name}] has unknown keys {sorted(extra)}")
                if name == "dynamics":
                    values["features"] = parts["features"]
                parts[name] = typ(**values)
        except (ContractError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**parts)

    def pipeline(self, seed: int) -> PipelineConfig:
        return PipelineConfig(
            dynamics=dataclasses.replace(self.dynamics, seed=seed),
            ppo=dataclasses.replace(self.ppo, seed=seed),
            imitation=self.imitation, imagination=self.imagination, dnnc=self.dnnc,
            critic_warmup=self.run.critic_warmup, seed=seed)


def _plain(v: Any) -> Any:
    if isinstance(v, tuple):
        return list(v)
    return v


def _coerce(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``table.key=value`` strings (values parsed as TOML literals, else kept as strings)."""
    d = {k: dict(v) for k, v in d.items()}
    for item in overrides:
        key, sep, value = item.partition("=")
        table, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like table.key=value")
        d.setdefault(table, {})[name] = _coerce(value.strip())
    return d


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    d: dict = {}
    if path is not None:
        try:
            d = tomllib.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if overrides:
        d = apply_overrides(d, overrides)
    return RunConfig.from_dict(d)


def dumps_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_config(cfg))


def desk_config() -> RunConfig:
    """Small dimensions that keep a full five-seed experiment within a CPU budget."""
    return RunConfig.from_dict({
        "features": {"embedding_dim": 16, "dense_story_dim": 13, "vocab_size": 85, "candidate_pool_size": 10},
        "dynamics": {"hidden_dim": 32, "state_dim": 32, "core_dim": 32, "epochs": 10},
        "ppo": {"hidden_dim": 32},
        "imitation": {"hidden_dim": 32},
        "imagination": {"n_iter": 2},
    })
