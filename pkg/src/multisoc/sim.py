"""Discrete-time 2D crowd world with robots and scripted humans.

Entities are stored as parallel numpy arrays on :class:`World`; robots occupy
indices ``0..R-1`` and humans ``R..N-1``.  ``EntityState`` is a per-entity
view for code that wants one object per entity.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import ScenarioConfig

ROBOT, HUMAN = 0, 1
KIND_NAMES = {ROBOT: "robot", HUMAN: "human"}
ACTIVE, REACHED, COLLIDED = 0, 1, 2
STATUS_NAMES = {ACTIVE: "active", REACHED: "reached", COLLIDED: "collided"}
STATUS_CODES = {v: k for k, v in STATUS_NAMES.items()}
KIND_CODES = {v: k for k, v in KIND_NAMES.items()}


class ScenarioError(RuntimeError):
    pass


class ActionError(ValueError):
    pass


@dataclass
class EntityState:
    id: int
    kind: int
    position: np.ndarray
    prev_position: np.ndarray
    velocity: np.ndarray
    goal: np.ndarray
    heading: float
    radius: float
    v_pref: float
    status: int = ACTIVE
    fov: float = 2 * math.pi
    sensor_range: float = math.inf

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.v_pref <= 0:
            raise ValueError("preferred speed must be positive")

    @property
    def is_robot(self) -> bool:
        return self.kind == ROBOT


@dataclass
class StepEvents:
    collisions: list = field(default_factory=list)  # (robot id, other id)
    reached: list = field(default_factory=list)
    human_goal_resets: list = field(default_factory=list)
    done: bool = False


class World:
    """Mutable state of one environment instance."""

    def __init__(self, cfg: ScenarioConfig, rng: np.random.Generator, n_robots: int, n_humans: int):
        n = n_robots + n_humans
        self.cfg = cfg
        self.rng = rng
        self.dt = float(cfg.dt)
        self.t = 0
        self.n_robots = n_robots
        self.n_humans = n_humans
        self.kind = np.array([ROBOT] * n_robots + [HUMAN] * n_humans, dtype=np.int64)
        self.pos = np.zeros((n, 2))
        self.prev_pos = np.zeros((n, 2))
        self.vel = np.zeros((n, 2))
        self.goal = np.zeros((n, 2))
        self.heading = np.zeros(n)
        self.radius = np.where(self.kind == ROBOT, cfg.robot_radius, cfg.human_radius).astype(float)
        self.v_pref = np.where(self.kind == ROBOT, cfg.v_pref, cfg.human_v_pref).astype(float)
        self.fov = np.where(self.kind == ROBOT, cfg.fov, cfg.human_fov).astype(float)
        self.sensor_range = np.where(self.kind == ROBOT, cfg.sensor_range,
                                     cfg.human_sensor_range).astype(float)
        self.status = np.full(n, ACTIVE, dtype=np.int64)
        self.human_policy = [""] * n
        self.predictions: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.kind.shape[0]

    @property
    def robot_ids(self) -> range:
        return range(self.n_robots)

    @property
    def human_ids(self) -> range:
        return range(self.n_robots, self.n)

    def entity(self, i: int) -> EntityState:
        return EntityState(
            id=i, kind=int(self.kind[i]), position=self.pos[i].copy(),
            prev_position=self.prev_pos[i].copy(), velocity=self.vel[i].copy(),
            goal=self.goal[i].copy(), heading=float(self.heading[i]),
            radius=float(self.radius[i]), v_pref=float(self.v_pref[i]),
            status=int(self.status[i]), fov=float(self.fov[i]),
            sensor_range=float(self.sensor_range[i]))

    @property
    def entities(self) -> list[EntityState]:
        return [self.entity(i) for i in range(self.n)]

    def active_robots(self) -> list[int]:
        return [i for i in self.robot_ids if self.status[i] == ACTIVE]

    def done(self) -> bool:
        robots_done = bool(np.all(self.status[: self.n_robots] != ACTIVE))
        return robots_done or self.t >= self.cfg.max_steps

    def goal_distance(self) -> np.ndarray:
        return np.linalg.norm(self.goal - self.pos, axis=1)

    def copy(self) -> "World":
        other = World.__new__(World)
        other.__dict__.update(self.__dict__)
        for name in ("kind", "pos", "prev_pos", "vel", "goal", "heading", "radius",
                     "v_pref", "fov", "sensor_range", "status"):
            setattr(other, name, getattr(self, name).copy())
        other.human_policy = list(self.human_policy)
        if self.predictions is not None:
            other.predictions = self.predictions.copy()
        return other


# ---------------------------------------------------------------------------
# scenario generation

def _clear(p: np.ndarray, others: list[np.ndarray], radius: float, other_radii: list[float],
           margin: float) -> bool:
    for q, rq in zip(others, other_radii):
        if math.hypot(p[0] - q[0], p[1] - q[1]) < radius + rq + margin:
            return False
    return True


def _uniform_in_disk(rng: np.random.Generator, radius: float) -> np.ndarray:
    r = radius * math.sqrt(rng.random())
    a = 2 * math.pi * rng.random()
    return np.array([r * math.cos(a), r * math.sin(a)])


def _human_circle_point(rng, cfg: ScenarioConfig):
    angle = 2 * math.pi * rng.random()
    base = cfg.circle_radius * np.array([math.cos(angle), math.sin(angle)])
    start = base + rng.uniform(-cfg.human_noise, cfg.human_noise, 2)
    goal = -base + rng.uniform(-cfg.human_noise, cfg.human_noise, 2)
    return start, goal


def generate_scenario(cfg: ScenarioConfig, rng: np.random.Generator) -> World:
    """Humans on a noisy circle heading for the far side; robots anywhere inside it."""
    cfg.validate()
    world = World(cfg, rng, cfg.robots, cfg.humans)
    margin = cfg.placement_margin
    starts: list[np.ndarray] = []
    start_r: list[float] = []
    human_goals: list[np.ndarray] = []

    for h in range(cfg.humans):
        for _ in range(cfg.placement_retries):
            start, goal = _human_circle_point(rng, cfg)
            if (_clear(start, starts, cfg.human_radius, start_r, margin)
                    and _clear(goal, human_goals, cfg.human_radius,
                               [cfg.human_radius] * len(human_goals), margin)):
                break
        else:
            raise ScenarioError(f"could not place human {h} after {cfg.placement_retries} tries")
        starts.append(start)
        start_r.append(cfg.human_radius)
        human_goals.append(goal)

    robot_starts: list[np.ndarray] = []
    robot_goals: list[np.ndarray] = []
    for r in range(cfg.robots):
        for _ in range(cfg.placement_retries):
            start = _uniform_in_disk(rng, cfg.circle_radius)
            goal = _uniform_in_disk(rng, cfg.circle_radius)
            if np.linalg.norm(goal - start) < max(cfg.robot_min_goal_dist, cfg.goal_radius):
                continue
            if not _clear(start, starts, cfg.robot_radius, start_r, margin):
                continue
            if not _clear(goal, robot_goals, cfg.robot_radius,
                          [cfg.robot_radius] * len(robot_goals), margin):
                continue
            break
        else:
            raise ScenarioError(f"could not place robot {r} after {cfg.placement_retries} tries")
        starts.append(start)
        start_r.append(cfg.robot_radius)
        robot_starts.append(start)
        robot_goals.append(goal)

    R = cfg.robots
    if R:
        world.pos[:R] = robot_starts
        world.goal[:R] = robot_goals
    if cfg.humans:
        world.pos[R:] = starts[: cfg.humans]
        world.goal[R:] = human_goals
    world.prev_pos[:] = world.pos
    d = world.goal - world.pos
    world.heading[:] = np.arctan2(d[:, 1], d[:, 0])

    # drawn after the geometry so policy mixes do not change positions
    for i in world.human_ids:
        if cfg.human_policy == "orca+sf":
            world.human_policy[i] = "orca" if rng.random() < 0.5 else "sf"
        else:
            world.human_policy[i] = cfg.human_policy
    world.predictions = predict_positions(world.pos, world.prev_pos, world.dt,
                                          cfg.prediction_horizon)
    return world


# ---------------------------------------------------------------------------
# perception geometry

def predict_positions(pos: np.ndarray, prev_pos: np.ndarray, dt: float, horizon: int) -> np.ndarray:
    """Constant-velocity rollout, shape (N, horizon, 2); step k is ``p + k*(p - p_prev)``."""
    step = pos - prev_pos  # = v_hat * dt
    k = np.arange(1, horizon + 1, dtype=float)[None, :, None]
    return pos[:, None, :] + k * step[:, None, :]


def sees_matrix(world: World) -> np.ndarray:
    """``S[i, k]`` is True when entity i perceives entity k (range and FoV cone)."""
    diff = world.pos[None, :, :] - world.pos[:, None, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    in_range = dist <= world.sensor_range[:, None]
    half = world.fov / 2.0
    hx = np.cos(world.heading)
    hy = np.sin(world.heading)
    with np.errstate(invalid="ignore", divide="ignore"):
        cosang = (diff[..., 0] * hx[:, None] + diff[..., 1] * hy[:, None]) / dist
    in_cone = (half[:, None] >= math.pi - 1e-12) | (cosang >= np.cos(half)[:, None] - 1e-12)
    s = in_range & in_cone
    np.fill_diagonal(s, True)
    return s


def visibility_matrix(world: World, j: int, sees: np.ndarray | None = None) -> np.ndarray:
    """Visibility graph restricted to what agent ``j`` perceives.

    ``M[i, k] = 1`` iff i sees k and j sees both i and k; rows and columns of
    entities j cannot see are zero.
    """
    if world.kind[j] != ROBOT:
        raise ValueError(f"entity {j} is not a robot")
    if sees is None:
        sees = sees_matrix(world)
    v = sees[j]
    return sees & v[:, None] & v[None, :]


# ---------------------------------------------------------------------------
# dynamics

def _clip_speed(v: np.ndarray, vmax: float) -> np.ndarray:
    s = math.hypot(v[0], v[1])
    if s > vmax:
        return v * (vmax / s)
    return v


def scripted_goal_velocity(pos, goal, v_pref, dt) -> np.ndarray:
    d = goal - pos
    dist = math.hypot(d[0], d[1])
    if dist < 1e-12:
        return np.zeros(2)
    return d / dist * min(v_pref, dist / dt)


def step_world(world: World, robot_actions: Mapping[int, Sequence[float]],
               human_policy: Callable[[World], np.ndarray] | None = None):
    """Advance ``world`` by one step in place.

    Returns ``(world, rewards, events)`` where ``rewards`` maps every robot that
    was active before the step to its reward.
    """
    if human_policy is None:
        from .humanpol import human_velocities as human_policy
    active = world.active_robots()
    for rid in robot_actions:
        if not (0 <= rid < world.n_robots):
            raise ActionError(f"action for unknown robot id {rid}")
        if world.status[rid] != ACTIVE:
            raise ActionError(f"action for inactive robot {rid} "
                              f"({STATUS_NAMES[int(world.status[rid])]})")
    missing = [rid for rid in active if rid not in robot_actions]
    if missing:
        raise ActionError(f"missing action for active robots {missing}")

    before_dist = world.goal_distance()
    new_vel = np.zeros_like(world.vel)
    if world.n_humans:
        new_vel[world.n_robots:] = human_policy(world)
    for rid in world.robot_ids:
        if world.status[rid] == ACTIVE:
            a = np.asarray(robot_actions[rid], dtype=float).reshape(2)
            if not np.all(np.isfinite(a)):
                raise ActionError(f"non-finite action for robot {rid}")
            new_vel[rid] = _clip_speed(a, world.v_pref[rid])
        else:
            new_vel[rid] = scripted_goal_velocity(world.pos[rid], world.goal[rid],
                                                  world.v_pref[rid], world.dt)

    world.prev_pos = world.pos.copy()
    world.vel = new_vel
    world.pos = world.pos + new_vel * world.dt
    speed = np.hypot(new_vel[:, 0], new_vel[:, 1])
    moving = speed > 1e-9
    world.heading = np.where(moving, np.arctan2(new_vel[:, 1], new_vel[:, 0]), world.heading)
    world.t += 1

    events = StepEvents()
    diff = world.pos[:, None, :] - world.pos[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    contact = dist < (world.radius[:, None] + world.radius[None, :])
    np.fill_diagonal(contact, False)
    collided_now = []
    for rid in active:
        others = np.flatnonzero(contact[rid])
        if others.size:
            collided_now.append(rid)
            for k in others:
                events.collisions.append((rid, int(k)))
    goal_dist = world.goal_distance()
    for rid in collided_now:
        world.status[rid] = COLLIDED
    for rid in active:
        if world.status[rid] == ACTIVE and goal_dist[rid] <= world.cfg.goal_radius:
            world.status[rid] = REACHED
            events.reached.append(rid)

    for h in world.human_ids:
        if goal_dist[h] <= world.radius[h]:
            _, new_goal = _human_circle_point(world.rng, world.cfg)
            world.goal[h] = new_goal
            events.human_goal_resets.append(h)

    world.predictions = predict_positions(world.pos, world.prev_pos, world.dt,
                                          world.cfg.prediction_horizon)
    sees = sees_matrix(world)
    rewards = {}
    for rid in active:
        rewards[rid] = compute_reward(before_dist[rid], world, rid, world.predictions,
                                      collided=rid in collided_now, sees=sees)
    events.done = world.done()
    return world, rewards, events


# ---------------------------------------------------------------------------
# reward

def prediction_penalty(world: World, j: int, predictions: np.ndarray, visible: np.ndarray,
                       collision_penalty: float) -> float:
    """Most negative ``r_c / 2**k`` over visible entities whose k-th predicted pose overlaps j."""
    others = np.flatnonzero(visible)
    others = others[others != j]
    if others.size == 0:
        return 0.0
    d = np.linalg.norm(predictions[others] - world.pos[j][None, None, :], axis=2)  # (M, K)
    overlap = d < (world.radius[j] + world.radius[others])[:, None]
    hit = overlap.any(axis=0)
    if not hit.any():
        return 0.0
    k = int(np.argmax(hit)) + 1  # earliest horizon gives the most negative term
    return collision_penalty / 2 ** k


def compute_reward(world_before, world_after: World, j: int, predictions: np.ndarray,
                   collided: bool | None = None, sees: np.ndarray | None = None) -> float:
    """Reward of robot ``j`` for the transition into ``world_after``.

    ``world_before`` is either the previous :class:`World` or the array (or
    scalar) of goal distances before the step. Collision overrides everything;
    otherwise potential shaping plus the predicted-path penalty. Reaching the
    goal earns nothing extra.
    """
    rc = world_after.cfg.collision_penalty
    if collided is None:
        d = np.linalg.norm(world_after.pos - world_after.pos[j], axis=1)
        touch = d < world_after.radius + world_after.radius[j]
        touch[j] = False
        collided = bool(touch.any())
    if collided:
        return float(rc)
    if isinstance(world_before, World):
        d_prev = float(np.linalg.norm(world_before.goal[j] - world_before.pos[j]))
    else:
        arr = np.asarray(world_before, dtype=float)
        d_prev = float(arr) if arr.ndim == 0 else float(arr[j])
    d_now = float(np.linalg.norm(world_after.goal[j] - world_after.pos[j]))
    r_pot = d_prev - d_now
    if sees is None:
        sees = sees_matrix(world_after)
    r_pred = prediction_penalty(world_after, j, predictions, sees[j], rc)
    return r_pot + r_pred


# ---------------------------------------------------------------------------
# episode logs and metrics

@dataclass
class EpisodeLog:
    dt: float
    kind: np.ndarray
    radius: np.ndarray
    positions: list = field(default_factory=list)   # (N, 2) per snapshot
    velocities: list = field(default_factory=list)
    goals: list = field(default_factory=list)
    statuses: list = field(default_factory=list)
    rewards: list = field(default_factory=list)     # (R,) per snapshot; 0 when not acting
    acted: list = field(default_factory=list)       # (R,) bool: robot was active this step
    visible: list = field(default_factory=list)     # (N,) seen by some robot
    sensor_range: float = 0.0
    goal_radius: float = 0.0

    @property
    def n_robots(self) -> int:
        return int((self.kind == ROBOT).sum())

    @property
    def length(self) -> int:
        return len(self.positions) - 1

    def record(self, world: World, rewards: Mapping[int, float] | None = None,
               sees: np.ndarray | None = None) -> None:
        R = world.n_robots
        r = np.zeros(R)
        acted = np.zeros(R, dtype=bool)
        for k, v in (rewards or {}).items():
            r[k] = v
            acted[k] = True
        if sees is None:
            sees = sees_matrix(world)
        self.positions.append(world.pos.copy())
        self.velocities.append(world.vel.copy())
        self.goals.append(world.goal.copy())
        self.statuses.append(world.status.copy())
        self.rewards.append(r)
        self.acted.append(acted)
        self.visible.append(sees[:R].any(axis=0))

    @classmethod
    def start(cls, world: World) -> "EpisodeLog":
        log = cls(dt=world.dt, kind=world.kind.copy(), radius=world.radius.copy(),
                  sensor_range=float(world.cfg.sensor_range),
                  goal_radius=float(world.cfg.goal_radius))
        log.record(world)
        return log

    def terminal_status(self) -> np.ndarray:
        return self.statuses[-1][: self.n_robots].copy()


@dataclass
class MetricsReport:
    success: float
    collision: float
    intrusion_ratio: float
    travel_time: float
    travel_length: float
    reward: float
    episodes: int = 0
    robots: int = 0

    COLUMNS = ("success", "collision", "intrusion_ratio", "travel_time", "travel_length", "reward")

    @property
    def timeout(self) -> float:
        return max(0.0, 1.0 - self.success - self.collision)

    def as_dict(self) -> dict:
        return {c: getattr(self, c) for c in self.COLUMNS + ("episodes", "robots")}

    def table(self) -> str:
        head = ["Success", "Collision", "Intrusion", "Travel Time", "Travel Length", "Reward"]
        vals = [f"{self.success:.2f}", f"{self.collision:.2f}", f"{self.intrusion_ratio:.2f}",
                f"{self.travel_time:.2f}", f"{self.travel_length:.2f}", f"{self.reward:.2f}"]
        widths = [max(len(h), len(v)) for h, v in zip(head, vals)]
        line1 = " | ".join(h.ljust(w) for h, w in zip(head, widths))
        line2 = " | ".join(v.ljust(w) for v, w in zip(vals, widths))
        return f"{line1}\n{line2}"


def episode_stats(log: EpisodeLog, discomfort_dist: float) -> dict:
    """Per-robot statistics of one episode."""
    R = log.n_robots
    pos = np.stack(log.positions)          # (T+1, N, 2)
    status = np.stack(log.statuses)        # (T+1, N)
    acted = np.stack(log.acted)[1:]        # (T, R)
    rewards = np.stack(log.rewards)[1:]    # (T, R)
    humans = np.flatnonzero(log.kind == HUMAN)
    steps = acted.sum(axis=0)
    seg = np.linalg.norm(pos[1:, :R] - pos[:-1, :R], axis=2)
    length = (seg * acted).sum(axis=0)
    if humans.size:
        d = np.linalg.norm(pos[1:, :R, None, :] - pos[1:, None, humans, :], axis=3)
        gap = d - log.radius[:R][None, :, None] - log.radius[humans][None, None, :]
        close = (gap < discomfort_dist).any(axis=2)
        intrusions = (close & acted).sum(axis=0)
    else:
        intrusions = np.zeros(R)
    final = status[-1, :R]
    return {
        "reached": final == REACHED,
        "collided": final == COLLIDED,
        "steps": steps,
        "time": steps * log.dt,
        "length": length,
        "intrusion": np.where(steps > 0, intrusions / np.maximum(steps, 1), 0.0),
        "reward": rewards.sum(axis=0),
    }


def compute_metrics(logs: Sequence[EpisodeLog], discomfort_dist: float) -> MetricsReport:
    """Aggregate episodes.

    Success and collision are fractions over every robot of every episode.
    The intrusion ratio is the percentage of a robot's active steps spent
    within ``discomfort_dist`` of a human (surface to surface), averaged over
    the robots of an episode and then over episodes.  Travel time, length and
    reward are means over all robots.
    """
    if not logs:
        raise ValueError("compute_metrics needs at least one episode log")
    reached, collided, times, lengths, rewards, intrusion = [], [], [], [], [], []
    for log in logs:
        s = episode_stats(log, discomfort_dist)
        reached.append(s["reached"])
        collided.append(s["collided"])
        times.append(s["time"])
        lengths.append(s["length"])
        rewards.append(s["reward"])
        intrusion.append(100.0 * float(np.mean(s["intrusion"])))
    reached = np.concatenate(reached)
    collided = np.concatenate(collided)
    return MetricsReport(
        success=float(reached.mean()),
        collision=float(collided.mean()),
        intrusion_ratio=float(np.mean(intrusion)),
        travel_time=float(np.concatenate(times).mean()),
        travel_length=float(np.concatenate(lengths).mean()),
        reward=float(np.concatenate(rewards).mean()),
        episodes=len(logs),
        robots=int(reached.size),
    )


CSV_FIELDS = ("t", "entity_id", "kind", "x", "y", "vx", "vy", "gx", "gy", "radius",
              "status", "reward", "visible")


def write_episode_csv(log: EpisodeLog, path) -> None:
    """One row per (t, entity); robot reward is the reward received at that step."""
    R = log.n_robots
    with open(path, "w", newline="") as fh:
        fh.write(f"# dt={log.dt}\n# sensor_range={log.sensor_range}\n"
                 f"# goal_radius={log.goal_radius}\n")
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for t in range(len(log.positions)):
            for i in range(log.kind.shape[0]):
                p = log.positions[t][i]
                v = log.velocities[t][i]
                g = log.goals[t][i]
                reward = log.rewards[t][i] if i < R else 0.0
                w.writerow([t, i, KIND_NAMES[int(log.kind[i])], repr(float(p[0])), repr(float(p[1])),
                            repr(float(v[0])), repr(float(v[1])), repr(float(g[0])), repr(float(g[1])),
                            repr(float(log.radius[i])), STATUS_NAMES[int(log.statuses[t][i])],
                            repr(float(reward)), int(bool(log.visible[t][i]))])


def read_episode_csv(path) -> tuple[dict, list[dict]]:
    """Parse an exported episode; returns (header metadata, rows).

    Malformed rows raise ``ValueError`` naming the line number.
    """
    meta: dict = {}
    rows: list[dict] = []
    path = Path(path)
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    header = None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                try:
                    meta[k.strip()] = float(v)
                except ValueError:
                    meta[k.strip()] = v.strip()
            continue
        cells = next(csv.reader([line]))
        if header is None:
            header = [c.strip() for c in cells]
            missing = {"t", "entity_id", "kind", "x", "y", "status"} - set(header)
            if missing:
                raise ValueError(f"{path}:{lineno}: header lacks columns {sorted(missing)}")
            continue
        if len(cells) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(cells)}")
        rec = dict(zip(header, cells))
        try:
            row = {
                "t": int(rec["t"]), "entity_id": int(rec["entity_id"]),
                "kind": rec["kind"], "x": float(rec["x"]), "y": float(rec["y"]),
                "status": rec["status"],
            }
            for key in ("vx", "vy", "gx", "gy", "radius", "reward"):
                if key in rec:
                    row[key] = float(rec[key])
            if "visible" in rec:
                row["visible"] = bool(int(rec["visible"]))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if row["kind"] not in KIND_CODES:
            raise ValueError(f"{path}:{lineno}: unknown kind {row['kind']!r}")
        if row["status"] not in STATUS_CODES:
            raise ValueError(f"{path}:{lineno}: unknown status {row['status']!r}")
        rows.append(row)
    if header is None and any(l.strip() and not l.startswith("#") for l in lines):
        raise ValueError(f"{path}:1: missing header")
    return meta, rows
