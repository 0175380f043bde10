"""Experiment configuration: a YAML key-value tree with strict validation.

Unknown keys are errors. Every field has a default; ``resolve`` expands
presets so the written config is self-contained.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .agents.common import REGIMES, TRAINERS, AgentConfig, ConfigError
from .envs import CartPole, CartpoleParams, GridWorld
from .randomizers import PRESET_SPACES, RandomizationSpace


@dataclass
class EnvConfig:
    kind: str = "gridworld"
    time_limit: int | None = None
    gamma: float | None = None
    resolution: int = 32
    frame_stack: int = 3
    forced_actions: int = 2
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    force: float = 10.0
    tau: float = 0.02
    angle_threshold_deg: float = 12.0
    x_threshold: float = 2.4


@dataclass
class SpaceConfig:
    preset: str | None = None
    kind: str | None = None
    reference: list[float] | None = None
    boxes: list | None = None
    values: list[float] | None = None
    xi_scale: float = 1.0


@dataclass
class AgentBlock:
    trainer: str = "reinforce"
    episodes: int = 2000
    max_steps: int | None = None
    lr: float = 1e-3
    batch_size: int = 32
    batch_episodes: int = 1
    hidden: list[int] = field(default_factory=lambda: [32, 32])
    hidden_activation: str = "tanh"
    conv: list[dict] | None = None
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_fraction: float = 0.25
    warmup: int = 1000
    train_every: int = 1
    buffer_capacity: int = 20000
    target_update: int = 0
    double_q: bool = False
    stop_gradient_on_reference: bool = False
    output_penalty: str = "logits"
    dropout: float = 0.0
    weight_decay: float = 0.0
    zero_xi_init: bool = False


@dataclass
class AnalysisBlock:
    regimes: list[str] = field(default_factory=lambda: ["regularized"])
    lambdas: list[float] = field(default_factory=lambda: [1.0])
    seeds: int = 1
    seeds_per_regime: dict[str, int] = field(default_factory=dict)
    grids: list[str] = field(default_factory=list)
    grid_size: int = 5
    episodes_per_domain: int = 100
    eval_mode: str = "greedy"
    bounds_mode: str | None = None  # exact on the gridworld, estimate elsewhere
    lipschitz_grid: int | None = None
    state_samples: int | None = None
    norm: str = "l2"
    feature_domains: str = "space_grid"
    feature_states: int = 50
    final_window: float = 0.1


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    out_dir: str | None = None
    env: EnvConfig = field(default_factory=EnvConfig)
    randomization: SpaceConfig = field(default_factory=SpaceConfig)
    agent: AgentBlock = field(default_factory=AgentBlock)
    analysis: AnalysisBlock = field(default_factory=AnalysisBlock)

    # --- derived objects ---------------------------------------------------

    def space(self) -> RandomizationSpace:
        r = self.randomization
        if r.preset is None and r.kind is None:
            return PRESET_SPACES["xi" if self.env.kind == "gridworld" else "big"]()
        if r.preset is not None:
            return PRESET_SPACES[r.preset]()
        d = {"kind": r.kind, "reference": r.reference, "boxes": r.boxes,
             "values": r.values, "xi_scale": r.xi_scale}
        return RandomizationSpace.from_dict(d)

    def make_env(self):
        e = self.env
        if e.kind == "gridworld":
            return GridWorld(e.time_limit or 10, 1.0 if e.gamma is None else e.gamma)
        params = CartpoleParams(e.gravity, e.cart_mass, e.pole_mass, e.half_length, e.force,
                                e.tau, math.radians(e.angle_threshold_deg), e.x_threshold,
                                e.time_limit or 200)
        return CartPole(params, e.resolution, e.frame_stack, e.forced_actions,
                        0.99 if e.gamma is None else e.gamma)

    def agent_config(self, regime: str, lam: float) -> AgentConfig:
        fields = dataclasses.asdict(self.agent)
        return AgentConfig(regime=regime, lam=lam, space=self.space(), **fields).validate()

    def cells(self) -> list[tuple[str, float, int]]:
        out = []
        for regime in self.analysis.regimes:
            lams = [0.0] if regime in ("normal", "randomized") else self.analysis.lambdas
            n = self.analysis.seeds_per_regime.get(regime, self.analysis.seeds)
            for lam in lams:
                for i in range(n):
                    out.append((regime, float(lam), i))
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def training_digest(self) -> str:
        """Hash of everything that influences training (not the analysis plan)."""
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in ("seed", "env", "randomization", "agent")},
                          sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.digest(), "space": json.dumps(self.space().to_dict())}


# --- parsing ---------------------------------------------------------------------

def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f"{path}.{name}" if path else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = _coerce(value, default, sub)
    return cls(**kwargs)


def _coerce(value, default, path):
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list")
    if isinstance(default, dict) and not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return value


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    e, a, an = cfg.env, cfg.agent, cfg.analysis
    if e.kind not in ("gridworld", "cartpole"):
        raise ConfigError(f"env.kind: unknown environment {e.kind!r}")
    if e.time_limit is not None and e.time_limit < 1:
        raise ConfigError("env.time_limit: must be >= 1")
    if e.gamma is not None and not 0 <= e.gamma <= 1:
        raise ConfigError("env.gamma: must lie in [0, 1]")
    if a.trainer not in TRAINERS:
        raise ConfigError(f"agent.trainer: unknown trainer {a.trainer!r}")
    r = cfg.randomization
    if r.preset is not None and r.preset not in PRESET_SPACES:
        raise ConfigError(f"randomization.preset: unknown space {r.preset!r}")
    try:
        space = cfg.space()
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"randomization: {exc}") from None
    want = "xi_set" if e.kind == "gridworld" else ("rgb_box", "rgb_union")
    if (space.kind != want) if isinstance(want, str) else (space.kind not in want):
        raise ConfigError(f"randomization.kind: {space.kind!r} does not fit env {e.kind!r}")
    for i, regime in enumerate(an.regimes):
        if regime not in REGIMES:
            raise ConfigError(f"analysis.regimes[{i}]: unknown regime {regime!r}")
    for i, lam in enumerate(an.lambdas):
        if not isinstance(lam, (int, float)) or lam < 0:
            raise ConfigError(f"analysis.lambdas[{i}]: must be a number >= 0")
    if any(reg in ("regularized", "output_regularized") for reg in an.regimes) and not an.lambdas:
        raise ConfigError("analysis.lambdas: regularized regimes need at least one lambda")
    for reg in an.seeds_per_regime:
        if reg not in an.regimes:
            raise ConfigError(f"analysis.seeds_per_regime.{reg}: regime not in analysis.regimes")
    if an.seeds < 0:
        raise ConfigError("analysis.seeds: must be >= 0")
    if an.bounds_mode not in (None, "exact", "estimate"):
        raise ConfigError("analysis.bounds_mode: must be 'exact' or 'estimate'")
    if an.bounds_mode == "exact" and e.kind != "gridworld":
        raise ConfigError("analysis.bounds_mode: exact bounds need the gridworld")
    if an.eval_mode not in ("greedy", "sample"):
        raise ConfigError("analysis.eval_mode: must be 'greedy' or 'sample'")
    for regime, lam, _ in cfg.cells():
        try:
            cfg.agent_config(regime, lam)
        except TypeError as exc:
            raise ConfigError(f"agent: {exc}") from None
    return cfg


def from_dict(data: dict) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, data or {}, ""))


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return from_dict(yaml.safe_load(fh))


def dump(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Expand the space preset and per-env defaults into explicit fields."""
    d = cfg.to_dict()
    space = cfg.space().to_dict()
    d["randomization"] = {"preset": None, "kind": space["kind"], "reference": space["reference"],
                          "boxes": space.get("boxes"), "values": space.get("values"),
                          "xi_scale": space.get("xi_scale", 1.0)}
    env = cfg.make_env()
    d["env"]["time_limit"] = env.spec.time_limit
    d["env"]["gamma"] = env.spec.gamma
    if d["analysis"]["bounds_mode"] is None:
        d["analysis"]["bounds_mode"] = "exact" if cfg.env.kind == "gridworld" else "estimate"
    return from_dict(d)


PRESETS = ("gridworld_bound", "gridworld_paths", "output_reg_tradeoff",
           "cartpole_grid", "cartpole_extrapolation", "value_std", "gridworld_regimes", "smoke")


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("visreg.presets").joinpath(f"{name}.yaml").read_text()
    return from_dict(yaml.safe_load(text))
