"""Multi-robot social navigation with a sparse graph-attention policy trained by shared-parameter PPO."""
from .config import ArchConfig, ConfigError, ScenarioConfig, TrainConfig, load_config
from .sim import EpisodeLog, MetricsReport, World, compute_metrics, generate_scenario, step_world

__all__ = [
    "ArchConfig", "ConfigError", "ScenarioConfig", "TrainConfig", "load_config",
    "EpisodeLog", "MetricsReport", "World", "compute_metrics", "generate_scenario", "step_world",
]
__version__ = "0.1.0"
