"""The MultiSoc actor-critic network.

Pipeline per observing robot ``j``::

    nodes --edge selector--> sparse graph --crowd coordinator--> node features
    row j ++ intrinsic embedding --GRU--> h --> (action mean, value)

All functions operate on batches: node features ``(B, N, D)``, adjacency
``(B, N, N)``, intrinsic vectors ``(B, 9)`` and agent indices ``(B,)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .config import ArchConfig
from .numcore import (NonFiniteError, ParamSet, affine, check_finite, gru_cell, gumbel_noise,
                      gumbel_softmax, init_linear, init_orthogonal, softmax_rows,
                      weighted_softmax_rows)
from .percept import INTRINSIC_DIM, NODE_DIM, Observation

Tensor = torch.Tensor
LOG_2PI = math.log(2 * math.pi)


@dataclass
class ObsBatch:
    nodes: Tensor
    adjacency: Tensor
    intrinsic: Tensor
    agent: Tensor

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def n(self) -> int:
        return self.nodes.shape[1]

    @classmethod
    def from_observations(cls, obs: Sequence[Observation], dtype=torch.float64) -> "ObsBatch":
        nodes = np.stack([o.graph.nodes for o in obs])
        adj = np.stack([o.graph.adjacency for o in obs])
        w = np.stack([o.intrinsic for o in obs])
        agent = np.array([o.graph.agent for o in obs], dtype=np.int64)
        return cls.from_arrays(nodes, adj, w, agent, dtype)

    @classmethod
    def from_arrays(cls, nodes, adjacency, intrinsic, agent, dtype=torch.float64) -> "ObsBatch":
        return cls(torch.as_tensor(nodes, dtype=dtype), torch.as_tensor(adjacency, dtype=torch.bool),
                   torch.as_tensor(intrinsic, dtype=dtype), torch.as_tensor(agent, dtype=torch.long))

    def index(self, idx) -> "ObsBatch":
        return ObsBatch(self.nodes[idx], self.adjacency[idx], self.intrinsic[idx], self.agent[idx])


@dataclass
class SparseGraph:
    features: Tensor       # (B, N, E) concatenated per-head attention outputs
    weights: Tensor        # (B, N, N) m_ij, mean over heads
    mask: Tensor           # (B, N, N) edge exists
    head_weights: Tensor   # (B, H, N, N) per-head selections s^k


@dataclass
class PolicyOutput:
    mean: Tensor
    log_std: Tensor
    value: Tensor
    hidden: Tensor
    action: Tensor | None = None
    log_prob: Tensor | None = None
    noise: Tensor | None = None


def effective_adjacency(adj: Tensor) -> Tensor:
    """Adjacency with a self-loop added on rows that have no visible destination."""
    n = adj.shape[-1]
    eye = torch.eye(n, dtype=torch.bool, device=adj.device)
    empty = ~adj.any(dim=-1, keepdim=True)
    return adj | (eye & empty)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, e = x.shape
    return x.view(b, n, heads, e // heads).transpose(1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return x.transpose(1, 2).reshape(b, n, h * d)


def edge_selector(batch: ObsBatch, params: Mapping[str, Tensor], arch: ArchConfig, tau: float,
                  noise: Tensor | None = None, rng: np.random.Generator | None = None,
                  hard: bool = True) -> SparseGraph:
    """Node-level multi-head attention followed by per-head Gumbel-Softmax edge picks.

    Each head selects one destination per source node in hard mode, so every
    node ends up with at most ``edge_selector_num_head`` outgoing edges.
    The per-edge selection logits are a linear map of the vector of per-head
    scaled dot-product scores of that edge (pre-softmax, so their range is not
    squashed into [0, 1]).
    """
    heads = arch.edge_selector_num_head
    nodes = batch.nodes
    adj = effective_adjacency(batch.adjacency)
    d_n = nodes.shape[-1]
    q = _split_heads(affine(nodes, params["es.wq"]), heads)
    k = _split_heads(affine(nodes, params["es.wk"]), heads)
    v = _split_heads(affine(nodes, params["es.wv"]), heads)
    scores = q @ k.transpose(-1, -2) / math.sqrt(d_n)
    mask = adj[:, None, :, :]
    attn = softmax_rows(scores, mask)
    out = attn @ v
    edge_scores = torch.where(mask, scores, torch.zeros_like(scores))
    logits = affine(edge_scores.permute(0, 2, 3, 1), params["es.mlp.w"], params["es.mlp.b"])
    logits = logits.permute(0, 3, 1, 2)
    if noise is None:
        if rng is None:
            raise ValueError("edge_selector needs either explicit noise or an rng")
        noise = gumbel_noise(tuple(logits.shape), rng, dtype=logits.dtype)
    s, selected = gumbel_softmax(logits, noise, tau, mask.expand_as(logits), hard)
    m = s.mean(dim=1)
    return SparseGraph(_merge_heads(out), m, selected.any(dim=1), s)


def crowd_coordinator(sparse: SparseGraph, params: Mapping[str, Tensor], num_heads: int,
                      return_attention: bool = False):
    """Single-layer graph attention over the sparse neighbourhoods.

    Attention logits are the scaled dot products; neighbour ``j`` of ``i`` is
    weighted by the edge coefficient ``m_ij`` so the result is differentiable
    in the edge selection (with one head picking each neighbour this is the
    plain masked softmax). No activation before the head concatenation.
    """
    h = sparse.features
    q = _split_heads(affine(h, params["cc.wq"]), num_heads)
    k = _split_heads(affine(h, params["cc.wk"]), num_heads)
    v = _split_heads(affine(h, params["cc.wv"]), num_heads)
    d_k = q.shape[-1]
    scores = q @ k.transpose(-1, -2) / math.sqrt(d_k)
    alpha = weighted_softmax_rows(scores, sparse.weights[:, None, :, :])
    out = _merge_heads(alpha @ v)
    if return_attention:
        return out, alpha
    return out


def intrinsic_coordinator(w: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    return torch.relu(affine(w, params["ic.w"], params["ic.b"]))


def trunk(batch: ObsBatch, params: Mapping[str, Tensor], arch: ArchConfig, tau: float,
          noise: Tensor | None = None, rng=None, hard: bool = True) -> tuple[Tensor, Tensor]:
    """Everything before the GRU; returns ``(v_const, noise)``."""
    if noise is None:
        if rng is None:
            raise ValueError("trunk needs either explicit noise or an rng")
        b, n = batch.size, batch.n
        noise = gumbel_noise((b, arch.edge_selector_num_head, n, n), rng,
                             dtype=batch.nodes.dtype)
    sparse = edge_selector(batch, params, arch, tau, noise=noise, hard=hard)
    check_finite(sparse.features, "edge_selector")
    nodes = crowd_coordinator(sparse, params, arch.mha_num_head)
    check_finite(nodes, "crowd_coordinator")
    own = nodes[torch.arange(batch.size), batch.agent]
    emb = intrinsic_coordinator(batch.intrinsic, params)
    check_finite(emb, "intrinsic_coordinator")
    return torch.cat([own, emb], dim=-1), noise


def heads(h: Tensor, params: Mapping[str, Tensor], arch: ArchConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Separate actor and critic MLPs on the recurrent state; returns (mean, log_std, value)."""
    a = torch.tanh(affine(h, params["actor.w1"], params["actor.b1"]))
    mean = affine(a, params["actor.w2"], params["actor.b2"])
    c = torch.tanh(affine(h, params["critic.w1"], params["critic.b1"]))
    value = affine(c, params["critic.w2"], params["critic.b2"])[..., 0]
    log_std = torch.clamp(params["actor.log_std"], arch.log_std_min, arch.log_std_max)
    return mean, log_std, value


def gaussian_log_prob(action: Tensor, mean: Tensor, log_std: Tensor) -> Tensor:
    z = (action - mean) / torch.exp(log_std)
    return (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(dim=-1)


def gaussian_entropy(log_std: Tensor) -> Tensor:
    return (log_std + 0.5 * (1.0 + LOG_2PI)).sum(dim=-1)


def forward(batch: ObsBatch, h_prev: Tensor, params: Mapping[str, Tensor], arch: ArchConfig,
            tau: float, rng: np.random.Generator | None = None, mode: str = "sample",
            noise: Tensor | None = None, hard: bool = True) -> PolicyOutput:
    """Full policy step for a batch of observations.

    ``mode`` is ``"sample"`` (Gaussian draw from ``rng``) or
    ``"deterministic"`` (the mean).  Gumbel noise is drawn from ``rng`` unless
    given explicitly.
    """
    if mode not in ("sample", "deterministic"):
        raise ValueError(f"unknown mode {mode!r}")
    v_const, noise = trunk(batch, params, arch, tau, noise=noise, rng=rng, hard=hard)
    h = gru_cell(h_prev, v_const, params, "gru.")
    check_finite(h, "gru")
    mean, log_std, value = heads(h, params, arch)
    check_finite(mean, "actor_head")
    check_finite(value, "critic_head")
    if mode == "deterministic":
        action = mean.detach()
    else:
        if rng is None:
            raise ValueError("sample mode needs an rng")
        eps = torch.as_tensor(rng.standard_normal(tuple(mean.shape)), dtype=mean.dtype)
        action = (mean + torch.exp(log_std) * eps).detach()
    log_prob = gaussian_log_prob(action, mean, log_std)
    return PolicyOutput(mean, log_std, value, h, action, log_prob, noise)


def temperature(step: int, start: float = 5.0, base: float = 0.05, minimum: float = 0.03,
                total_steps: int = 20_000_000) -> float:
    """Exponential anneal from ``start`` reaching ``base`` at ``total_steps``, floored at ``minimum``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if total_steps <= 0:
        return max(minimum, start)
    tau = start * (base / start) ** (step / total_steps)
    return max(minimum, tau)


def init_params(arch: ArchConfig, rng: np.random.Generator, dtype=torch.float64,
                node_dim: int = NODE_DIM, intrinsic_dim: int = INTRINSIC_DIM) -> ParamSet:
    """Uniform fan-in scaling for linear maps, orthogonal recurrent blocks, zero biases.

    The action-mean output layer is orthogonal with gain ``arch.gain``.
    """
    p = ParamSet(dtype)
    E = arch.edge_selector_emb_size
    H = arch.edge_selector_num_head
    M = arch.mha_emb_size
    A = arch.agent_embedding_size
    R = arch.human_node_rnn_size
    O = arch.human_node_output_size
    for name in ("es.wq", "es.wk", "es.wv"):
        p.add(name, init_linear(rng, node_dim, E))
    p.add("es.mlp.w", init_linear(rng, H, H))
    p.add("es.mlp.b", np.zeros(H))
    for name in ("cc.wq", "cc.wk", "cc.wv"):
        p.add(name, init_linear(rng, E, M))
    p.add("ic.w", init_linear(rng, intrinsic_dim, A))
    p.add("ic.b", np.zeros(A))
    p.add("gru.w_ih", np.concatenate([init_orthogonal(rng, M + A, R) for _ in range(3)], axis=1))
    p.add("gru.w_hh", np.concatenate([init_orthogonal(rng, R, R) for _ in range(3)], axis=1))
    p.add("gru.b_ih", np.zeros(3 * R))
    p.add("gru.b_hh", np.zeros(3 * R))
    p.add("actor.w1", init_linear(rng, R, O))
    p.add("actor.b1", np.zeros(O))
    p.add("actor.w2", init_orthogonal(rng, O, 2, gain=arch.gain))
    p.add("actor.b2", np.zeros(2))
    p.add("actor.log_std", np.full(2, arch.log_std_init))
    p.add("critic.w1", init_linear(rng, R, O))
    p.add("critic.b1", np.zeros(O))
    p.add("critic.w2", init_linear(rng, O, 1))
    p.add("critic.b2", np.zeros(1))
    return p


def is_critic_param(name: str) -> bool:
    return name.startswith("critic.")


class MultiSocPolicy:
    """Parameters plus architecture, with a convenience ``act`` for rollouts."""

    def __init__(self, arch: ArchConfig, params: ParamSet | None = None,
                 rng: np.random.Generator | None = None, dtype=torch.float64):
        self.arch = arch.validate()
        self.dtype = dtype
        if params is None:
            params = init_params(arch, rng if rng is not None else np.random.default_rng(0), dtype)
        self.params = params

    def initial_hidden(self, batch_size: int) -> Tensor:
        return torch.zeros(batch_size, self.arch.human_node_rnn_size, dtype=self.dtype)

    def __call__(self, batch: ObsBatch, h_prev: Tensor, tau: float, rng=None, mode="sample",
                 noise=None, hard=True) -> PolicyOutput:
        return forward(batch, h_prev, self.params, self.arch, tau, rng, mode, noise, hard)

    @torch.no_grad()
    def act(self, obs: Sequence[Observation], h_prev: Tensor, tau: float, rng,
            deterministic: bool = False) -> PolicyOutput:
        batch = ObsBatch.from_observations(obs, self.dtype)
        return self(batch, h_prev, tau, rng, "deterministic" if deterministic else "sample")
