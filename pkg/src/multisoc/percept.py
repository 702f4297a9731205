"""Per-robot observations: predicted trajectories on a visibility-masked graph."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .sim import ACTIVE, HUMAN, ROBOT, EntityState, World, predict_positions, sees_matrix, \
    visibility_matrix

HORIZON = 5
NODE_DIM = 2 * (HORIZON + 1) + 2
INTRINSIC_DIM = 9


def predict_trajectory(entity: EntityState, dt: float, K: int = HORIZON) -> np.ndarray:
    """K constant-velocity positions; velocity is estimated from the last displacement."""
    v_hat = (np.asarray(entity.position, float) - np.asarray(entity.prev_position, float)) / dt
    out = np.empty((K, 2))
    for k in range(1, K + 1):
        out[k - 1] = entity.position + k * v_hat * dt
    return out


@dataclass
class InteractionGraph:
    nodes: np.ndarray       # (N, NODE_DIM)
    adjacency: np.ndarray   # (N, N) bool
    agent: int

    @property
    def n(self) -> int:
        return self.nodes.shape[0]


@dataclass
class Observation:
    graph: InteractionGraph
    intrinsic: np.ndarray   # [px, py, vx, vy, gx, gy, theta, r, v_pref]

    @property
    def agent(self) -> int:
        return self.graph.agent


def node_features(world: World, predictions: np.ndarray) -> np.ndarray:
    n = world.n
    traj = np.concatenate([world.pos[:, None, :], predictions], axis=1).reshape(n, -1)
    label = np.zeros((n, 2))
    label[world.kind == ROBOT, 0] = 1.0
    label[world.kind == HUMAN, 1] = 1.0
    return np.concatenate([traj, label], axis=1)


def intrinsic_vector(world: World, j: int) -> np.ndarray:
    return np.array([world.pos[j, 0], world.pos[j, 1], world.vel[j, 0], world.vel[j, 1],
                     world.goal[j, 0], world.goal[j, 1], world.heading[j], world.radius[j],
                     world.v_pref[j]])


def build_observation(world: World, j: int, agent_centric: bool | None = None,
                      sees: np.ndarray | None = None, features: np.ndarray | None = None
                      ) -> Observation:
    """Observation of robot ``j``: masked node features, adjacency and intrinsic state."""
    if world.kind[j] != ROBOT:
        raise ValueError(f"entity {j} is not a robot")
    if agent_centric is None:
        agent_centric = world.cfg.agent_centric
    if sees is None:
        sees = sees_matrix(world)
    if features is None:
        preds = world.predictions
        if preds is None or preds.shape[1] != HORIZON:
            preds = predict_positions(world.pos, world.prev_pos, world.dt, HORIZON)
        features = node_features(world, preds)
    adj = visibility_matrix(world, j, sees)
    visible = sees[j]
    nodes = features.copy()
    w = intrinsic_vector(world, j)
    if agent_centric:
        origin = world.pos[j]
        nodes[:, : 2 * (HORIZON + 1)] -= np.tile(origin, HORIZON + 1)
        w[0:2] -= origin
        w[4:6] -= origin
    nodes[~visible] = 0.0
    return Observation(InteractionGraph(nodes, adj, j), w)


def build_observations(world: World, robots: Sequence[int] | None = None,
                       agent_centric: bool | None = None) -> list[Observation]:
    """Observations for several robots sharing one visibility computation."""
    if robots is None:
        robots = [i for i in world.robot_ids if world.status[i] == ACTIVE]
    sees = sees_matrix(world)
    preds = world.predictions
    if preds is None or preds.shape[1] != HORIZON:
        preds = predict_positions(world.pos, world.prev_pos, world.dt, HORIZON)
    feats = node_features(world, preds)
    return [build_observation(world, j, agent_centric, sees, feats) for j in robots]
