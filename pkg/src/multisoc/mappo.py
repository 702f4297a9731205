"""Shared-parameter multi-agent PPO: rollouts, GAE, recurrent PPO updates, training and evaluation."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
import zlib
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import numcore, policy as pol
from .config import ArchConfig, ScenarioConfig, TrainConfig, dump_config
from .percept import INTRINSIC_DIM, NODE_DIM, build_observations
from .sim import ACTIVE, COLLIDED, REACHED, EpisodeLog, MetricsReport, World, compute_metrics, \
    episode_stats, generate_scenario, sees_matrix, step_world

log = logging.getLogger(__name__)


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for component ``name`` under the root ``seed``."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))


def worker_threads() -> int:
    raw = os.environ.get("MULTISOC_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# value normalisation

class ValueNormalizer:
    """Debiased exponential running mean/variance of return targets."""

    def __init__(self, beta: float = 0.99999, epsilon: float = 1e-5, var_floor: float = 1e-2):
        self.beta = beta
        self.epsilon = epsilon
        self.var_floor = var_floor
        self.running_mean = 0.0
        self.running_mean_sq = 0.0
        self.debiasing = 0.0

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return
        self.running_mean = self.beta * self.running_mean + (1 - self.beta) * x.mean()
        self.running_mean_sq = self.beta * self.running_mean_sq + (1 - self.beta) * (x ** 2).mean()
        self.debiasing = self.beta * self.debiasing + (1 - self.beta)

    def stats(self) -> tuple[float, float]:
        if self.debiasing <= 0:
            return 0.0, 1.0
        d = max(self.debiasing, self.epsilon)
        mean = self.running_mean / d
        var = max(self.running_mean_sq / d - mean ** 2, self.var_floor)
        return mean, var

    def normalize(self, x):
        mean, var = self.stats()
        return (x - mean) / math.sqrt(var)

    def denormalize(self, x):
        mean, var = self.stats()
        return x * math.sqrt(var) + mean

    def state(self) -> dict:
        return {"running_mean": self.running_mean, "running_mean_sq": self.running_mean_sq,
                "debiasing": self.debiasing, "beta": self.beta}

    def load(self, state: dict) -> None:
        self.running_mean = float(state["running_mean"])
        self.running_mean_sq = float(state["running_mean_sq"])
        self.debiasing = float(state["debiasing"])
        self.beta = float(state.get("beta", self.beta))


# ---------------------------------------------------------------------------
# environments

class NavEnv:
    """One scenario instance that regenerates itself when an episode ends."""

    def __init__(self, cfg: ScenarioConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.world: World = generate_scenario(cfg, rng)
        self.episode_rewards = np.zeros(cfg.robots)
        self.log: EpisodeLog | None = None

    def reset(self) -> World:
        self.world = generate_scenario(self.cfg, self.rng)
        self.episode_rewards = np.zeros(self.cfg.robots)
        return self.world

    def step(self, actions: dict):
        world, rewards, events = step_world(self.world, actions)
        for k, v in rewards.items():
            self.episode_rewards[k] += v
        return rewards, events


@dataclass
class EpisodeSummary:
    success: float
    collision: float
    reward: float   # mean over robots of the episode return
    length: int


@dataclass
class RolloutBatch:
    nodes: np.ndarray        # (T, E, R, N, D)
    adjacency: np.ndarray    # (T, E, R, N, N)
    intrinsic: np.ndarray    # (T, E, R, 9)
    agent: np.ndarray        # (R,)
    actions: np.ndarray      # (T, E, R, 2)
    log_probs: np.ndarray    # (T, E, R)
    values: np.ndarray       # (T + 1, E, R) denormalised
    rewards: np.ndarray      # (T, E, R)
    active: np.ndarray       # (T, E, R) robot acted at step t
    dones: np.ndarray        # (T, E, R) robot's trajectory ends after step t
    first: np.ndarray        # (T, E, R) hidden state was reset before step t
    hidden: np.ndarray       # (T, E, R, H) hidden state fed into step t
    noise: np.ndarray        # (T, E, R, heads, N, N)
    tau: float
    episodes: list = field(default_factory=list)

    @property
    def shape(self):
        return self.rewards.shape

    def transitions(self) -> int:
        return int(self.active.sum())


def _obs_arrays(worlds: Sequence[World], n_robots: int, agent_centric: bool):
    obs = []
    for w in worlds:
        obs.extend(build_observations(w, list(range(n_robots)), agent_centric))
    nodes = np.stack([o.graph.nodes for o in obs])
    adj = np.stack([o.graph.adjacency for o in obs])
    intr = np.stack([o.intrinsic for o in obs])
    agent = np.array([o.graph.agent for o in obs], dtype=np.int64)
    return nodes, adj, intr, agent


class RolloutCollector:
    """Steps several environments in lockstep with one shared policy."""

    def __init__(self, envs: Sequence[NavEnv], policy: pol.MultiSocPolicy,
                 normalizer: ValueNormalizer, rng: np.random.Generator):
        self.envs = list(envs)
        self.policy = policy
        self.normalizer = normalizer
        self.rng = rng
        self.n_robots = self.envs[0].cfg.robots
        self.hidden = np.zeros((len(self.envs), self.n_robots, policy.arch.human_node_rnn_size),
                               dtype=np.float32)
        self.first = np.ones((len(self.envs), self.n_robots), dtype=bool)

    def _forward(self, nodes, adj, intr, agent, hidden, tau, mode="sample"):
        dtype = self.policy.dtype
        batch = pol.ObsBatch.from_arrays(nodes, adj, intr, agent, dtype)
        h = torch.as_tensor(hidden, dtype=dtype)
        with torch.no_grad():
            return self.policy(batch, h, tau, self.rng, mode)

    def collect(self, steps: int, tau: float) -> RolloutBatch:
        E, R = len(self.envs), self.n_robots
        arch = self.policy.arch
        agent_centric = self.envs[0].cfg.agent_centric
        N = self.envs[0].world.n
        Hh = arch.human_node_rnn_size
        heads = arch.edge_selector_num_head
        f32 = np.float32
        b = RolloutBatch(
            nodes=np.zeros((steps, E, R, N, NODE_DIM), f32),
            adjacency=np.zeros((steps, E, R, N, N), bool),
            intrinsic=np.zeros((steps, E, R, INTRINSIC_DIM), f32),
            agent=np.arange(R),
            actions=np.zeros((steps, E, R, 2), f32),
            log_probs=np.zeros((steps, E, R), f32),
            values=np.zeros((steps + 1, E, R), f32),
            rewards=np.zeros((steps, E, R), f32),
            active=np.zeros((steps, E, R), bool),
            dones=np.zeros((steps, E, R), bool),
            first=np.zeros((steps, E, R), bool),
            hidden=np.zeros((steps, E, R, Hh), f32),
            noise=np.zeros((steps, E, R, heads, N, N), f32),
            tau=float(tau),
        )
        for t in range(steps):
            worlds = [env.world for env in self.envs]
            nodes, adj, intr, agent = _obs_arrays(worlds, R, agent_centric)
            self.hidden[self.first] = 0.0
            b.first[t] = self.first
            b.hidden[t] = self.hidden
            out = self._forward(nodes, adj, intr, agent, self.hidden.reshape(E * R, Hh), tau)
            b.nodes[t] = nodes.reshape(E, R, N, NODE_DIM)
            b.adjacency[t] = adj.reshape(E, R, N, N)
            b.intrinsic[t] = intr.reshape(E, R, INTRINSIC_DIM)
            b.noise[t] = out.noise.numpy().reshape(E, R, heads, N, N)
            actions = out.action.numpy().reshape(E, R, 2)
            b.actions[t] = actions
            b.log_probs[t] = out.log_prob.numpy().reshape(E, R)
            b.values[t] = self.normalizer.denormalize(out.value.numpy().reshape(E, R))
            self.hidden = out.hidden.numpy().reshape(E, R, Hh).astype(f32)
            self.first = np.zeros((E, R), dtype=bool)
            for e, env in enumerate(self.envs):
                world = env.world
                acting = [r for r in range(R) if world.status[r] == ACTIVE]
                try:
                    rewards, events = env.step({r: actions[e, r] for r in acting})
                except Exception as exc:
                    raise RuntimeError(f"environment {e} failed at step {t}: {exc}") from exc
                for r in acting:
                    b.active[t, e, r] = True
                    b.rewards[t, e, r] = rewards[r]
                    if env.world.status[r] != ACTIVE:
                        b.dones[t, e, r] = True
                if events.done:
                    for r in acting:
                        b.dones[t, e, r] = True
                    st = env.world.status[:R]
                    b.episodes.append(EpisodeSummary(
                        success=float(np.mean(st == REACHED)),
                        collision=float(np.mean(st == COLLIDED)),
                        reward=float(env.episode_rewards.mean()),
                        length=env.world.t))
                    env.reset()
                    self.first[e] = True
        # bootstrap values for the state after the last step
        worlds = [env.world for env in self.envs]
        nodes, adj, intr, agent = _obs_arrays(worlds, R, agent_centric)
        hidden = self.hidden.copy()
        hidden[self.first] = 0.0
        out = self._forward(nodes, adj, intr, agent, hidden.reshape(E * R, Hh), tau,
                            mode="deterministic")
        b.values[steps] = self.normalizer.denormalize(out.value.numpy().reshape(E, R))
        return b


def collect_rollouts(envs: Sequence[NavEnv], policy: pol.MultiSocPolicy, steps: int, tau: float,
                     rng: np.random.Generator, normalizer: ValueNormalizer | None = None
                     ) -> RolloutBatch:
    collector = RolloutCollector(envs, policy, normalizer or ValueNormalizer(), rng)
    return collector.collect(steps, tau)


# ---------------------------------------------------------------------------
# advantages

def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, gamma: float, lam: float
        ) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates along axis 0.

    ``values`` has one more row than ``rewards`` (the bootstrap). ``dones[t]``
    cuts both the bootstrap and the recursion after step ``t``.
    Returns ``(advantages, returns)`` with ``returns = advantages + values[:-1]``.
    """
    T = rewards.shape[0]
    adv = np.zeros(rewards.shape, dtype=np.float64)
    last = np.zeros(rewards.shape[1:], dtype=np.float64)
    for t in reversed(range(T)):
        nonterminal = 1.0 - dones[t].astype(np.float64)
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values[:-1]


def standardize(x: np.ndarray, mask: np.ndarray | None = None, eps: float = 1e-8) -> np.ndarray:
    sel = x[mask] if mask is not None else x
    if sel.size == 0:
        return x
    mean = sel.mean()
    std = sel.std()
    return (x - mean) / (std + eps)


# ---------------------------------------------------------------------------
# PPO

@dataclass
class UpdateStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    approx_kl: float = 0.0
    clip_fraction: float = 0.0
    grad_norm: float = 0.0
    surrogate_per_epoch: list = field(default_factory=list)


def ppo_losses(new_log_prob, old_log_prob, advantages, clip: float, mask):
    """Clipped surrogate loss (to minimise) averaged over ``mask``; also returns the clip fraction."""
    ratio = torch.exp(new_log_prob - old_log_prob)
    surr1 = ratio * advantages
    surr2 = torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * advantages
    obj = torch.minimum(surr1, surr2)
    denom = mask.sum().clamp(min=1.0)
    loss = -(obj * mask).sum() / denom
    clipped = ((ratio - 1.0).abs() > clip).to(obj.dtype)
    return loss, (clipped * mask).sum() / denom


def huber(x: torch.Tensor, delta: float) -> torch.Tensor:
    a = x.abs()
    return torch.where(a <= delta, 0.5 * x * x, delta * (a - 0.5 * delta))


def evaluate_sequences(policy: pol.MultiSocPolicy, nodes, adj, intr, agent, noise, h0, first, tau):
    """Re-run the policy over contiguous chunks.

    Shapes: ``nodes`` (C, L, N, D), ``h0`` (C, H), ``first`` (C, L).
    Returns (mean (C, L, 2), log_std, values (C, L)).
    """
    C, L = nodes.shape[:2]
    N = nodes.shape[2]
    dtype = policy.dtype
    batch = pol.ObsBatch(nodes.reshape(C * L, N, -1), adj.reshape(C * L, N, N),
                         intr.reshape(C * L, -1), agent.reshape(C * L))
    v_const, _ = pol.trunk(batch, policy.params, policy.arch, tau,
                           noise=noise.reshape(C * L, *noise.shape[2:]), hard=True)
    v_const = v_const.view(C, L, -1)
    h = h0
    hs = []
    keep = (~first).to(dtype)
    for t in range(L):
        h = h * keep[:, t:t + 1]
        h = numcore.gru_cell(h, v_const[:, t], policy.params, "gru.")
        hs.append(h)
    hs = torch.stack(hs, dim=1)
    mean, log_std, value = pol.heads(hs, policy.params, policy.arch)
    return mean, log_std, value


def ppo_update(policy: pol.MultiSocPolicy, batch: RolloutBatch, cfg: TrainConfig,
               normalizer: ValueNormalizer, rng: np.random.Generator,
               advantages: np.ndarray | None = None, returns: np.ndarray | None = None
               ) -> UpdateStats:
    """Clipped-surrogate PPO epochs over recurrent chunks of the batch."""
    T, E, R = batch.shape
    L = cfg.data_chunk_length
    dtype = policy.dtype
    if advantages is None or returns is None:
        advantages, returns = gae(batch.rewards, batch.values, batch.dones, cfg.gamma, cfg.gae_lambda)
    active = batch.active
    normalizer.update(returns[active])
    adv = standardize(advantages, active)
    target = normalizer.normalize(returns)

    def to_chunks(x):
        # (T, E, R, ...) -> (E*R*T/L, L, ...)
        x = np.moveaxis(x, 0, 2)  # (E, R, T, ...)
        return x.reshape(E * R * (T // L), L, *x.shape[3:])

    ch = {
        "nodes": to_chunks(batch.nodes), "adj": to_chunks(batch.adjacency),
        "intr": to_chunks(batch.intrinsic), "noise": to_chunks(batch.noise),
        "actions": to_chunks(batch.actions), "logp": to_chunks(batch.log_probs),
        "adv": to_chunks(adv), "target": to_chunks(target), "active": to_chunks(active),
        "first": to_chunks(batch.first), "hidden": to_chunks(batch.hidden)[:, 0],
    }
    agent_idx = np.broadcast_to(np.arange(R)[None, :, None, None], (E, R, T // L, L))
    ch["agent"] = agent_idx.reshape(-1, L)
    n_chunks = ch["nodes"].shape[0]
    tensors = {k: torch.as_tensor(np.ascontiguousarray(v)) for k, v in ch.items()}
    for k in ("nodes", "intr", "noise", "actions", "logp", "adv", "target", "hidden"):
        tensors[k] = tensors[k].to(dtype)

    stats = UpdateStats()
    n_updates = 0
    lr_of = lambda name: cfg.critic_lr if pol.is_critic_param(name) else cfg.lr
    for epoch in range(cfg.ppo_epoch):
        perm = rng.permutation(n_chunks)
        epoch_surr = 0.0
        epoch_count = 0.0
        for mb in np.array_split(perm, cfg.numminibatch):
            idx = torch.as_tensor(mb, dtype=torch.long)
            g = {k: v[idx] for k, v in tensors.items()}
            mean, log_std, value = evaluate_sequences(
                policy, g["nodes"], g["adj"], g["intr"], g["agent"], g["noise"], g["hidden"],
                g["first"], batch.tau)
            mask = g["active"].to(dtype)
            new_logp = pol.gaussian_log_prob(g["actions"], mean, log_std)
            p_loss, clip_frac = ppo_losses(new_logp, g["logp"], g["adv"], cfg.clip_param, mask)
            denom = mask.sum().clamp(min=1.0)
            v_loss = (huber(g["target"] - value, cfg.huber_delta) * mask).sum() / denom
            entropy = pol.gaussian_entropy(log_std)
            loss = p_loss + cfg.value_loss_coef * v_loss - cfg.entropy_coef * entropy
            if not torch.isfinite(loss):
                raise numcore.NonFiniteError("ppo_update", f"loss={float(loss)}")
            policy.params.zero_grad()
            loss.backward()
            gnorm = numcore.clip_grad_norm(policy.params, cfg.max_grad_norm)
            numcore.adam_step(policy.params, lr_of, eps=cfg.adam_eps)
            with torch.no_grad():
                kl = ((g["logp"] - new_logp) * mask).sum() / denom
            stats.policy_loss += p_loss.item()
            stats.value_loss += v_loss.item()
            stats.entropy += entropy.item()
            stats.approx_kl += float(kl)
            stats.clip_fraction += clip_frac.item()
            stats.grad_norm += gnorm
            epoch_surr += -p_loss.item() * float(denom)
            epoch_count += float(denom)
            n_updates += 1
        stats.surrogate_per_epoch.append(epoch_surr / max(epoch_count, 1.0))
    for name in ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction", "grad_norm"):
        setattr(stats, name, getattr(stats, name) / max(n_updates, 1))
    return stats


# ---------------------------------------------------------------------------
# checkpoints

def save_policy_checkpoint(path, policy: pol.MultiSocPolicy, normalizer: ValueNormalizer | None,
                           step: int, cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    tensors = {}
    for name, value in policy.params.state_dict().items():
        tensors["param/" + name] = value
    for name, m in policy.params.adam_m.items():
        tensors["adam_m/" + name] = m.numpy()
        tensors["adam_v/" + name] = policy.params.adam_v[name].numpy()
    meta = {
        "format": "multisoc-policy",
        "step": int(step),
        "arch": dataclasses.asdict(policy.arch),
        "adam_step": policy.params.step_count,
        "normalizer": normalizer.state() if normalizer else None,
        "config": cfg.to_flat() if cfg else None,
    }
    meta.update(extra or {})
    numcore.save_checkpoint(path, tensors, meta)


class CheckpointMismatch(ValueError):
    pass


def load_policy_checkpoint(path, arch: ArchConfig | None = None, dtype=torch.float32):
    """Returns ``(policy, normalizer, metadata)``.

    With ``arch`` given, every dimension must agree with the stored one.
    """
    tensors, meta = numcore.load_checkpoint(path)
    stored = ArchConfig(**meta["arch"])
    if arch is not None:
        for f in dataclasses.fields(ArchConfig):
            a, b = getattr(arch, f.name), getattr(stored, f.name)
            if f.type in ("int", int) and a != b:
                raise CheckpointMismatch(
                    f"checkpoint/architecture mismatch on '{f.name}': checkpoint has {b}, "
                    f"configuration has {a}")
    policy = pol.MultiSocPolicy(arch or stored, rng=np.random.default_rng(0), dtype=dtype)
    values = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    try:
        policy.params.load_values(values)
    except numcore.DimensionError as exc:
        raise CheckpointMismatch(f"checkpoint/architecture mismatch: {exc}") from None
    for k, v in tensors.items():
        if k.startswith("adam_m/"):
            name = k[len("adam_m/"):]
            policy.params.adam_m[name] = torch.as_tensor(v.copy(), dtype=dtype)
            policy.params.adam_v[name] = torch.as_tensor(tensors["adam_v/" + name].copy(), dtype=dtype)
    policy.params.step_count = int(meta.get("adam_step", 0))
    normalizer = ValueNormalizer()
    if meta.get("normalizer"):
        normalizer.load(meta["normalizer"])
    return policy, normalizer, meta


# ---------------------------------------------------------------------------
# training

CURVE_FIELDS = ("step", "iteration", "episodes", "episode_reward", "success_rate",
                "collision_rate", "iter_episodes", "iter_episode_reward", "iter_success_rate",
                "tau", "policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction")


@dataclass
class TrainResult:
    out_dir: Path
    checkpoints: list
    curve_path: Path
    final_step: int
    policy: pol.MultiSocPolicy
    normalizer: ValueNormalizer


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else "nan"
    return str(x)


def train(cfg: TrainConfig, out_dir, resume: str | os.PathLike | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Collect, estimate advantages, update; repeat for ``num_env_steps`` environment steps.

    Writes ``config.resolved``, ``curve.csv`` and ``checkpoints/step_*.msoc``
    under ``out_dir``.
    """
    cfg.validate()
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.resolved")
    torch.set_num_threads(worker_threads())
    dtype = torch.float32

    scen = dataclasses.replace(cfg.scenario)
    start_step = 0
    if resume is not None:
        policy, normalizer, meta = load_policy_checkpoint(resume, cfg.arch, dtype)
        start_step = int(meta["step"])
        tag = f"/resume{start_step}"
    else:
        policy = pol.MultiSocPolicy(cfg.arch, rng=stream(cfg.seed, "init"), dtype=dtype)
        normalizer = ValueNormalizer()
        tag = ""
    envs = [NavEnv(scen, stream(cfg.seed, f"env/{e}{tag}")) for e in range(cfg.nrolloutthread)]
    collector = RolloutCollector(envs, policy, normalizer, stream(cfg.seed, f"rollout{tag}"))
    ppo_rng = stream(cfg.seed, f"ppo{tag}")

    curve_path = out / "curve.csv"
    mode = "a" if resume is not None and curve_path.exists() else "w"
    curve_fh = open(curve_path, mode, newline="")
    writer = csv.writer(curve_fh)
    if mode == "w":
        writer.writerow(CURVE_FIELDS)

    checkpoints = []

    def checkpoint(step):
        path = ckpt_dir / f"step_{step:09d}.msoc"
        save_policy_checkpoint(path, policy, normalizer, step, cfg)
        checkpoints.append(path)
        log.info("checkpoint %s", path)

    if resume is None:
        checkpoint(0)
    step = start_step
    iteration = 0
    per_iter = cfg.nrolloutthread * cfg.episode_length
    window = deque(maxlen=cfg.log_window)
    next_save = (step // cfg.save_interval + 1) * cfg.save_interval
    t0 = time.time()
    try:
        while step < cfg.num_env_steps:
            tau = pol.temperature(step, cfg.temperature_at_beginning, cfg.base_temperature,
                                  cfg.min_temperature, cfg.num_env_steps)
            batch = collector.collect(cfg.episode_length, tau)
            try:
                stats = ppo_update(policy, batch, cfg, normalizer, ppo_rng)
            except numcore.NonFiniteError:
                checkpoint_path = ckpt_dir / f"diagnostic_{step:09d}.msoc"
                save_policy_checkpoint(checkpoint_path, policy, normalizer, step, cfg,
                                       {"diagnostic": True})
                raise
            step += per_iter
            iteration += 1
            window.extend(batch.episodes)
            it_eps = batch.episodes
            row = {
                "step": step, "iteration": iteration, "episodes": len(window),
                "episode_reward": float(np.mean([e.reward for e in window])) if window else float("nan"),
                "success_rate": float(np.mean([e.success for e in window])) if window else float("nan"),
                "collision_rate": float(np.mean([e.collision for e in window])) if window else float("nan"),
                "iter_episodes": len(it_eps),
                "iter_episode_reward": float(np.mean([e.reward for e in it_eps])) if it_eps else float("nan"),
                "iter_success_rate": float(np.mean([e.success for e in it_eps])) if it_eps else float("nan"),
                "tau": tau, "policy_loss": stats.policy_loss, "value_loss": stats.value_loss,
                "entropy": stats.entropy, "approx_kl": stats.approx_kl,
                "clip_fraction": stats.clip_fraction,
            }
            writer.writerow([_fmt(row[k]) for k in CURVE_FIELDS])
            curve_fh.flush()
            if progress is not None:
                progress(dict(row, elapsed=time.time() - t0))
            if step >= next_save or step >= cfg.num_env_steps:
                checkpoint(step)
                next_save = (step // cfg.save_interval + 1) * cfg.save_interval
    finally:
        curve_fh.close()
    return TrainResult(out, checkpoints, curve_path, step, policy, normalizer)


def read_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (float(v) if k not in ("step", "iteration", "episodes", "iter_episodes")
                        else int(float(v))) for k, v in r.items()})
    return out


def smoothed_reward(curve: list[dict], at_step: int, window: int = 100_000) -> float:
    """Episode-weighted mean of per-iteration episode rewards over ``(at_step - window, at_step]``."""
    num = 0.0
    den = 0
    for r in curve:
        if at_step - window < r["step"] <= at_step and r["iter_episodes"] > 0:
            num += r["iter_episode_reward"] * r["iter_episodes"]
            den += r["iter_episodes"]
    return num / den if den else float("nan")


# ---------------------------------------------------------------------------
# evaluation

class Controller:
    """Produces actions for the active robots of a set of worlds."""

    def reset(self, n_worlds: int, n_robots: int, rngs: Sequence[np.random.Generator]) -> None:
        pass

    def act(self, worlds: Sequence[World]) -> list[dict]:
        raise NotImplementedError


class PolicyController(Controller):
    def __init__(self, policy: pol.MultiSocPolicy, tau: float, deterministic: bool = True,
                 agent_centric: bool | None = None):
        self.policy = policy
        self.tau = tau
        self.deterministic = deterministic
        self.agent_centric = agent_centric

    def reset(self, n_worlds, n_robots, rngs):
        self.rngs = list(rngs)
        self.n_robots = n_robots
        self.hidden = torch.zeros(n_worlds * n_robots, self.policy.arch.human_node_rnn_size,
                                  dtype=self.policy.dtype)

    def act(self, worlds):
        R = self.n_robots
        ac = worlds[0].cfg.agent_centric if self.agent_centric is None else self.agent_centric
        nodes, adj, intr, agent = _obs_arrays(worlds, R, ac)
        N = nodes.shape[1]
        heads = self.policy.arch.edge_selector_num_head
        dtype = self.policy.dtype
        noise = torch.cat([numcore.gumbel_noise((R, heads, N, N), g, dtype) for g in self.rngs])
        batch = pol.ObsBatch.from_arrays(nodes, adj, intr, agent, dtype)
        with torch.no_grad():
            v_const, _ = pol.trunk(batch, self.policy.params, self.policy.arch, self.tau, noise=noise)
            h = numcore.gru_cell(self.hidden, v_const, self.policy.params, "gru.")
            mean, log_std, _ = pol.heads(h, self.policy.params, self.policy.arch)
            if self.deterministic:
                action = mean
            else:
                eps = np.concatenate([g.standard_normal((R, 2)) for g in self.rngs])
                action = mean + torch.exp(log_std) * torch.as_tensor(eps, dtype=dtype)
        self.hidden = h
        action = action.numpy().reshape(len(worlds), R, 2)
        return [{r: action[e, r] for r in range(R) if w.status[r] == ACTIVE}
                for e, w in enumerate(worlds)]


class GoalSeekController(Controller):
    """Heads straight for the goal at preferred speed; ignores everyone."""

    def act(self, worlds):
        out = []
        for w in worlds:
            acts = {}
            for r in w.active_robots():
                d = w.goal[r] - w.pos[r]
                dist = float(np.hypot(*d))
                acts[r] = d / dist * min(w.v_pref[r], dist / w.dt) if dist > 0 else np.zeros(2)
            out.append(acts)
        return out


class RandomController(Controller):
    """Isotropic Gaussian velocity commands with unit standard deviation."""

    def reset(self, n_worlds, n_robots, rngs):
        self.rngs = list(rngs)

    def act(self, worlds):
        return [{r: g.standard_normal(2) for r in w.active_robots()} for w, g in zip(worlds, self.rngs)]


def run_episodes(controller: Controller, scenario: ScenarioConfig, episodes: int, seed: int,
                 max_steps: int | None = None, lockstep: int = 16,
                 keep_logs: bool = True) -> list[EpisodeLog]:
    """Run ``episodes`` evaluation episodes; episode ``e`` depends only on (seed, e)."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    scen = dataclasses.replace(scenario)
    if max_steps is not None:
        scen.max_steps = max_steps
    logs: list[EpisodeLog] = []
    for start in range(0, episodes, lockstep):
        ids = list(range(start, min(episodes, start + lockstep)))
        worlds = [generate_scenario(scen, stream(seed, f"eval/{e}")) for e in ids]
        rngs = [stream(seed, f"eval-policy/{e}") for e in ids]
        controller.reset(len(worlds), scen.robots, rngs)
        elogs = [EpisodeLog.start(w) for w in worlds]
        finished = [False] * len(worlds)
        while not all(finished):
            actions = controller.act(worlds)
            for e, w in enumerate(worlds):
                if finished[e]:
                    continue
                _, rewards, events = step_world(w, actions[e])
                elogs[e].record(w, rewards)
                if events.done:
                    finished[e] = True
        logs.extend(elogs)
    return logs


def evaluate(controller: Controller, scenario: ScenarioConfig, episodes: int, seed: int,
             max_steps: int | None = None) -> tuple[MetricsReport, list[EpisodeLog]]:
    logs = run_episodes(controller, scenario, episodes, seed, max_steps)
    return compute_metrics(logs, scenario.discomfort_dist), logs
