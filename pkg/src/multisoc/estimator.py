"""A scikit-learn style wrapper around training and evaluation.

``fit`` trains in an output directory, ``predict`` maps observations to
velocity commands and ``score`` returns the evaluation success rate, so the
navigator works with ``get_params``/``set_params``/``clone``.
"""
from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator

from . import mappo, policy as pol
from .config import TrainConfig, apply_overrides, load_config


class MultiSocNavigator(BaseEstimator):
    def __init__(self, config=None, num_env_steps=None, seed=1, out_dir=None, overrides=None,
                 eval_episodes=100, eval_seed=1000, deterministic=True):
        self.config = config
        self.num_env_steps = num_env_steps
        self.seed = seed
        self.out_dir = out_dir
        self.overrides = overrides
        self.eval_episodes = eval_episodes
        self.eval_seed = eval_seed
        self.deterministic = deterministic

    def _train_config(self) -> TrainConfig:
        cfg = load_config(self.config) if self.config else TrainConfig()
        values = {k: str(v) for k, v in (self.overrides or {}).items()}
        values["seed"] = str(self.seed)
        if self.num_env_steps is not None:
            values["num_env_steps"] = str(self.num_env_steps)
        return apply_overrides(cfg, values).validate()

    def fit(self, X=None, y=None):
        """Train from scratch; ``X`` and ``y`` are ignored (the simulator is the data)."""
        cfg = self._train_config()
        out = self.out_dir or tempfile.mkdtemp(prefix="multisoc-")
        result = mappo.train(cfg, out)
        self.config_ = cfg
        self.policy_ = result.policy
        self.normalizer_ = result.normalizer
        self.out_dir_ = Path(out)
        self.checkpoints_ = list(result.checkpoints)
        self.tau_ = pol.temperature(result.final_step, cfg.temperature_at_beginning,
                                    cfg.base_temperature, cfg.min_temperature, cfg.num_env_steps)
        return self

    def _check_fitted(self):
        if not hasattr(self, "policy_"):
            raise AttributeError("MultiSocNavigator is not fitted yet; call fit first")

    def predict(self, X, hidden=None, rng=None):
        """Velocity commands for a sequence of observations, shape (len(X), 2)."""
        self._check_fitted()
        h = hidden if hidden is not None else self.policy_.initial_hidden(len(X))
        rng = rng if rng is not None else np.random.default_rng(self.eval_seed)
        out = self.policy_.act(X, h, self.tau_, rng, deterministic=self.deterministic)
        return out.action.numpy().astype(np.float64)

    def evaluate(self, scenario=None):
        self._check_fitted()
        scen = scenario or self.config_.scenario
        controller = mappo.PolicyController(self.policy_, self.tau_, self.deterministic)
        report, _ = mappo.evaluate(controller, scen, self.eval_episodes, self.eval_seed)
        return report

    def score(self, X=None, y=None):
        """Success rate over ``eval_episodes`` evaluation episodes (``X`` may be a scenario)."""
        return self.evaluate(X).success
