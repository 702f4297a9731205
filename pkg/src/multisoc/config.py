"""Flat ``key = value`` configuration files for scenarios, architecture and training.

One file may mix keys of all three groups; each key is routed to the group
that declares it.  Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

log = logging.getLogger(__name__)

HUMAN_POLICIES = ("orca", "sf", "orca+sf", "orca+fov")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message)


@dataclass
class ScenarioConfig:
    humans: int = 4
    robots: int = 2
    circle_radius: float = 6.0
    human_noise: float = 0.5
    fov_deg: float = 360.0
    sensor_range: float = 5.0
    human_fov_deg: float = 180.0
    human_sensor_range: float = 5.0
    dt: float = 0.25
    seed: int = 0
    human_policy: str = "orca"
    robot_radius: float = 0.3
    human_radius: float = 0.3
    v_pref: float = 1.0
    human_v_pref: float = 1.0
    goal_radius: float = 0.3
    discomfort_dist: float = 0.25
    max_steps: int = 150
    collision_penalty: float = -20.0
    prediction_horizon: int = 5
    humans_react_to_robots: bool = False
    robot_min_goal_dist: float = 2.0
    placement_margin: float = 0.2
    placement_retries: int = 1000
    agent_centric: bool = False
    orca_time_horizon: float = 5.0
    orca_neighbor_dist: float = 10.0
    orca_safety_space: float = 0.01
    sf_A: float = 2.0
    sf_B: float = 0.5
    sf_tau: float = 0.5

    def validate(self) -> "ScenarioConfig":
        if self.humans < 0:
            raise ConfigError("humans must be >= 0", "humans")
        if self.robots < 1:
            raise ConfigError("robots must be >= 1", "robots")
        if self.dt <= 0:
            raise ConfigError("dt must be positive", "dt")
        for key in ("robot_radius", "human_radius", "v_pref", "human_v_pref", "circle_radius"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive", key)
        if self.human_policy not in HUMAN_POLICIES:
            raise ConfigError(
                f"human_policy must be one of {', '.join(HUMAN_POLICIES)}, got {self.human_policy!r}",
                "human_policy")
        if not 0 < self.fov_deg <= 360 or not 0 < self.human_fov_deg <= 360:
            raise ConfigError("field of view must lie in (0, 360] degrees", "fov_deg")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1", "max_steps")
        return self

    @property
    def fov(self) -> float:
        return math.radians(self.fov_deg)

    @property
    def human_fov(self) -> float:
        return math.radians(self.human_fov_deg)


# Table-IV keys that have no block in the network; accepted and ignored.
UNUSED_ARCH_KEYS = (
    "edge_selector_embedding_size",
    "human_node_embedding_size",
    "human_human_edge_embedding_size",
    "attention_size",
    "human_node_input_size",
    "human_human_edge_input_size",
    "human_human_edge_rnn_size",
)


@dataclass
class ArchConfig:
    human_node_rnn_size: int = 128
    human_node_output_size: int = 256
    agent_embedding_size: int = 64
    edge_selector_emb_size: int = 512
    edge_selector_num_head: int = 4
    mha_emb_size: int = 256
    mha_num_head: int = 8
    gain: float = 0.0
    log_std_init: float = 0.0
    log_std_min: float = -5.0
    log_std_max: float = 2.0

    def validate(self) -> "ArchConfig":
        if self.edge_selector_num_head < 1:
            raise ConfigError("edge_selector_num_head must be >= 1", "edge_selector_num_head")
        if self.edge_selector_emb_size % self.edge_selector_num_head:
            raise ConfigError("edge_selector_emb_size must be divisible by edge_selector_num_head",
                              "edge_selector_emb_size")
        if self.mha_num_head < 1 or self.mha_emb_size % self.mha_num_head:
            raise ConfigError("mha_emb_size must be divisible by mha_num_head", "mha_emb_size")
        for key in ("human_node_rnn_size", "human_node_output_size", "agent_embedding_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive", key)
        return self


@dataclass
class TrainConfig:
    nrolloutthread: int = 16
    numminibatch: int = 2
    episode_length: int = 50
    data_chunk_length: int = 50
    num_env_steps: int = 20_000_000
    ppo_epoch: int = 5
    lr: float = 4e-5
    critic_lr: float = 4e-5
    temperature_at_beginning: float = 5.0
    base_temperature: float = 0.05
    min_temperature: float = 0.03
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_param: float = 0.2
    entropy_coef: float = 0.01
    value_loss_coef: float = 1.0
    max_grad_norm: float = 10.0
    huber_delta: float = 10.0
    adam_eps: float = 1e-5
    save_interval: int = 100_000
    log_window: int = 100
    seed: int = 1
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)

    def validate(self) -> "TrainConfig":
        self.scenario.validate()
        self.arch.validate()
        if self.episode_length % self.data_chunk_length:
            raise ConfigError("episode_length must be a multiple of data_chunk_length",
                              "data_chunk_length")
        n_chunks = self.nrolloutthread * self.scenario.robots * (
            self.episode_length // self.data_chunk_length)
        if self.numminibatch < 1 or self.numminibatch > n_chunks:
            raise ConfigError(f"numminibatch must lie in [1, {n_chunks}]", "numminibatch")
        if self.num_env_steps < 0:
            raise ConfigError("num_env_steps must be >= 0", "num_env_steps")
        if not (self.temperature_at_beginning > 0 and self.base_temperature > 0
                and self.min_temperature > 0):
            raise ConfigError("temperatures must be positive", "temperature_at_beginning")
        if self.save_interval < 1:
            raise ConfigError("save_interval must be >= 1", "save_interval")
        return self

    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name in ("scenario", "arch"):
                continue
            out[f.name] = getattr(self, f.name)
        out.update(dataclasses.asdict(self.arch))
        out.update(dataclasses.asdict(self.scenario))
        # the training seed is the root seed; scenario seed is kept separately
        out["seed"] = self.seed
        out["scenario_seed"] = self.scenario.seed
        return out


_ALIASES = {
    "data_chunck_length": "data_chunk_length",
    "episode length": "episode_length",
    "num env steps": "num_env_steps",
    "ppo epoch": "ppo_epoch",
    "scenario_seed": "scenario.seed",
}


def _coerce(key: str, raw: str, target_type):
    raw = raw.strip()
    try:
        if target_type is bool or target_type == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target_type is int or target_type == "int":
            return int(float(raw)) if "e" in raw.lower() else int(raw.replace("_", ""))
        if target_type is float or target_type == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for key '{key}': {raw!r}", key) from None


def _field_types(obj) -> dict:
    return {f.name: f.type for f in fields(obj)}


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        key = _ALIASES.get(key, key)
        out[key] = value.strip()
    return out


def apply_overrides(cfg: TrainConfig, values: dict[str, str]) -> TrainConfig:
    train_types = _field_types(cfg)
    arch_types = _field_types(cfg.arch)
    scen_types = _field_types(cfg.scenario)
    for key, raw in values.items():
        if key == "scenario.seed":
            cfg.scenario.seed = _coerce(key, raw, "int")
        elif key in UNUSED_ARCH_KEYS:
            log.warning("config key %r has no corresponding network block; ignored", key)
        elif key == "seed":
            cfg.seed = _coerce(key, raw, "int")
            cfg.scenario.seed = cfg.seed
        elif key in arch_types:
            setattr(cfg.arch, key, _coerce(key, raw, arch_types[key]))
        elif key in scen_types:
            setattr(cfg.scenario, key, _coerce(key, raw, scen_types[key]))
        elif key in train_types and key not in ("scenario", "arch"):
            setattr(cfg, key, _coerce(key, raw, train_types[key]))
        else:
            raise ConfigError(f"unknown config key '{key}'", key)
    return cfg


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    values = parse_lines(path.read_text(), str(path))
    cfg = apply_overrides(base or TrainConfig(), values)
    return cfg.validate()


def load_scenario(path) -> ScenarioConfig:
    return load_config(path).scenario


def dump_config(cfg: TrainConfig, path) -> None:
    lines = ["# resolved configuration"]
    for key, value in cfg.to_flat().items():
        if isinstance(value, bool):
            value = int(value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def config_from_flat(values: dict) -> TrainConfig:
    """Rebuild a configuration from :meth:`TrainConfig.to_flat` output (e.g. checkpoint metadata)."""
    raw = {}
    for key, value in values.items():
        if isinstance(value, bool):
            value = int(value)
        raw[key] = str(value)
    seed = raw.pop("seed", None)
    scen_seed = raw.pop("scenario_seed", None)
    if seed is not None:
        raw["seed"] = seed
    cfg = apply_overrides(TrainConfig(), raw)
    if scen_seed is not None:
        cfg.scenario.seed = int(scen_seed)
    return cfg.validate()
