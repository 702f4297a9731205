"""Scripted pedestrians: ORCA, Social Force and a FoV-limited ORCA variant.

The ORCA solver follows the RVO2 formulation (half-plane constraints in
velocity space, incremental 2D linear program, 3D fallback when the
constraint set is infeasible), written with plain floats because the
problems are tiny.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .sim import HUMAN, ROBOT, EntityState, World

RVO_EPSILON = 1e-5


@dataclass
class OrcaParams:
    time_horizon: float = 5.0
    neighbor_dist: float = 10.0
    safety_space: float = 0.01
    dt: float = 0.25


@dataclass
class SocialForceParams:
    A: float = 2.0
    B: float = 0.5
    tau: float = 0.5
    neighbor_dist: float = 10.0
    dt: float = 0.25


def preferred_velocity(pos, goal, v_pref: float, dt: float) -> tuple[float, float]:
    """Toward the goal at ``v_pref``, slowed so one step never overshoots."""
    dx = goal[0] - pos[0]
    dy = goal[1] - pos[1]
    dist = math.hypot(dx, dy)
    if dist < 1e-12:
        return 0.0, 0.0
    speed = min(v_pref, dist / dt)
    return dx / dist * speed, dy / dist * speed


# ---------------------------------------------------------------------------
# ORCA

def _det(ax, ay, bx, by):
    return ax * by - ay * bx


def _lp1(lines, no, radius, opt, direction_opt):
    px, py, dx, dy = lines[no]
    dot = px * dx + py * dy
    disc = dot * dot + radius * radius - (px * px + py * py)
    if disc < 0.0:
        return None
    sq = math.sqrt(disc)
    t_left = -dot - sq
    t_right = -dot + sq
    for i in range(no):
        qx, qy, ex, ey = lines[i]
        denom = _det(dx, dy, ex, ey)
        numer = _det(ex, ey, px - qx, py - qy)
        if abs(denom) <= RVO_EPSILON:
            if numer < 0.0:
                return None
            continue
        t = numer / denom
        if denom >= 0.0:
            t_right = min(t_right, t)
        else:
            t_left = max(t_left, t)
        if t_left > t_right:
            return None
    if direction_opt:
        t = t_right if opt[0] * dx + opt[1] * dy > 0.0 else t_left
    else:
        t = dx * (opt[0] - px) + dy * (opt[1] - py)
        t = min(max(t, t_left), t_right)
    return (px + t * dx, py + t * dy)


def _lp2(lines, radius, opt, direction_opt):
    if direction_opt:
        result = (opt[0] * radius, opt[1] * radius)
    elif opt[0] * opt[0] + opt[1] * opt[1] > radius * radius:
        n = math.hypot(opt[0], opt[1])
        result = (opt[0] / n * radius, opt[1] / n * radius)
    else:
        result = opt
    for i, (px, py, dx, dy) in enumerate(lines):
        if _det(dx, dy, px - result[0], py - result[1]) > 0.0:
            new = _lp1(lines, i, radius, opt, direction_opt)
            if new is None:
                return i, result
            result = new
    return len(lines), result


def _lp3(lines, begin, radius, result):
    distance = 0.0
    for i in range(begin, len(lines)):
        px, py, dx, dy = lines[i]
        if _det(dx, dy, px - result[0], py - result[1]) > distance:
            proj = []
            for j in range(i):
                qx, qy, ex, ey = lines[j]
                determinant = _det(dx, dy, ex, ey)
                if abs(determinant) <= RVO_EPSILON:
                    if dx * ex + dy * ey > 0.0:
                        continue
                    pt = (0.5 * (px + qx), 0.5 * (py + qy))
                else:
                    s = _det(ex, ey, px - qx, py - qy) / determinant
                    pt = (px + s * dx, py + s * dy)
                nx, ny = ex - dx, ey - dy
                nn = math.hypot(nx, ny)
                proj.append((pt[0], pt[1], nx / nn, ny / nn))
            fail, new = _lp2(proj, radius, (-dy, dx), True)
            if fail >= len(proj):
                result = new
            distance = _det(dx, dy, px - result[0], py - result[1])
    return result


def orca_solve(pos, vel, radius: float, pref_vel, max_speed: float,
               neighbors: Sequence[tuple], params: OrcaParams) -> tuple[float, float]:
    """ORCA velocity for one agent.

    ``neighbors`` holds ``(px, py, vx, vy, radius)`` tuples; the caller is
    responsible for any range or FoV filtering beyond ``neighbor_dist``.
    """
    inv_th = 1.0 / params.time_horizon
    inv_dt = 1.0 / params.dt
    lines = []
    nd2 = params.neighbor_dist ** 2
    for (ox, oy, ovx, ovy, orad) in neighbors:
        rpx, rpy = ox - pos[0], oy - pos[1]
        dist_sq = rpx * rpx + rpy * rpy
        if dist_sq > nd2:
            continue
        rvx, rvy = vel[0] - ovx, vel[1] - ovy
        comb = radius + orad + 2.0 * params.safety_space
        comb_sq = comb * comb
        if dist_sq > comb_sq:
            wx, wy = rvx - inv_th * rpx, rvy - inv_th * rpy
            w_sq = wx * wx + wy * wy
            dot1 = wx * rpx + wy * rpy
            if dot1 < 0.0 and dot1 * dot1 > comb_sq * w_sq:
                wl = math.sqrt(w_sq)
                ux, uy = wx / wl, wy / wl
                dx, dy = uy, -ux
                mag = comb * inv_th - wl
                u = (mag * ux, mag * uy)
            else:
                leg = math.sqrt(dist_sq - comb_sq)
                if _det(rpx, rpy, wx, wy) > 0.0:
                    dx = (rpx * leg - rpy * comb) / dist_sq
                    dy = (rpx * comb + rpy * leg) / dist_sq
                else:
                    dx = -(rpx * leg + rpy * comb) / dist_sq
                    dy = -(-rpx * comb + rpy * leg) / dist_sq
                dot2 = rvx * dx + rvy * dy
                u = (dot2 * dx - rvx, dot2 * dy - rvy)
        else:
            wx, wy = rvx - inv_dt * rpx, rvy - inv_dt * rpy
            wl = math.hypot(wx, wy)
            if wl < 1e-12:
                # coincident centres with equal velocity: push apart along a fixed axis
                wx, wy, wl = 1.0, 0.0, 1.0
            ux, uy = wx / wl, wy / wl
            dx, dy = uy, -ux
            mag = comb * inv_dt - wl
            u = (mag * ux, mag * uy)
        lines.append((vel[0] + 0.5 * u[0], vel[1] + 0.5 * u[1], dx, dy))
    pref = (float(pref_vel[0]), float(pref_vel[1]))
    fail, result = _lp2(lines, max_speed, pref, False)
    if fail < len(lines):
        result = _lp3(lines, fail, max_speed, result)
    return result


def orca_velocity(self_state: EntityState, neighbors: Sequence[EntityState],
                  params: OrcaParams | None = None) -> np.ndarray:
    params = params or OrcaParams()
    pref = preferred_velocity(self_state.position, self_state.goal, self_state.v_pref, params.dt)
    nb = [(float(n.position[0]), float(n.position[1]), float(n.velocity[0]),
           float(n.velocity[1]), float(n.radius)) for n in neighbors]
    v = orca_solve(self_state.position, self_state.velocity, self_state.radius, pref,
                   self_state.v_pref, nb, params)
    return np.array(v, dtype=float)


# ---------------------------------------------------------------------------
# Social Force

def social_force(self_state: EntityState, neighbors: Sequence[EntityState],
                 params: SocialForceParams | None = None) -> np.ndarray:
    """Goal relaxation plus exponential repulsion ``A exp((r_sum - d) / B)``."""
    params = params or SocialForceParams()
    p = self_state.position
    desired = np.array(preferred_velocity(p, self_state.goal, self_state.v_pref, params.dt))
    force = (desired - self_state.velocity) / params.tau
    for n in neighbors:
        diff = p - n.position
        d = float(np.hypot(*diff))
        if d > params.neighbor_dist or d < 1e-12:
            continue
        mag = params.A * math.exp((self_state.radius + n.radius - d) / params.B)
        force = force + mag * diff / d
    return force


def social_force_velocity(self_state: EntityState, neighbors: Sequence[EntityState],
                          params: SocialForceParams | None = None) -> np.ndarray:
    params = params or SocialForceParams()
    f = social_force(self_state, neighbors, params)
    v = self_state.velocity + f * params.dt
    s = float(np.hypot(*v))
    if s > self_state.v_pref:
        v = v * (self_state.v_pref / s)
    return v


# ---------------------------------------------------------------------------
# whole-crowd evaluation

def in_fov(world: World, i: int, k: int) -> bool:
    half = world.fov[i] / 2.0
    if half >= math.pi - 1e-12:
        return True
    dx = world.pos[k, 0] - world.pos[i, 0]
    dy = world.pos[k, 1] - world.pos[i, 1]
    d = math.hypot(dx, dy)
    if d < 1e-12:
        return True
    h = world.heading[i]
    return (dx * math.cos(h) + dy * math.sin(h)) / d >= math.cos(half) - 1e-12


def human_velocities(world: World) -> np.ndarray:
    """New velocities for every human in ``world``, shape (H, 2)."""
    cfg = world.cfg
    orca = OrcaParams(cfg.orca_time_horizon, cfg.orca_neighbor_dist, cfg.orca_safety_space, world.dt)
    sf = SocialForceParams(cfg.sf_A, cfg.sf_B, cfg.sf_tau, cfg.orca_neighbor_dist, world.dt)
    candidates = [k for k in range(world.n)
                  if world.kind[k] == HUMAN or (cfg.humans_react_to_robots and world.kind[k] == ROBOT)]
    pos = world.pos
    vel = world.vel
    out = np.zeros((world.n_humans, 2))
    for row, h in enumerate(world.human_ids):
        policy = world.human_policy[h] or "orca"
        others = [k for k in candidates if k != h]
        if policy == "orca+fov":
            others = [k for k in others if in_fov(world, h, k)]
        if policy == "sf":
            me = world.entity(h)
            out[row] = social_force_velocity(me, [world.entity(k) for k in others], sf)
            continue
        pref = preferred_velocity(pos[h], world.goal[h], world.v_pref[h], world.dt)
        nb = [(pos[k, 0], pos[k, 1], vel[k, 0], vel[k, 1], world.radius[k]) for k in others]
        out[row] = orca_solve((pos[h, 0], pos[h, 1]), (vel[h, 0], vel[h, 1]), float(world.radius[h]),
                              pref, float(world.v_pref[h]), nb, orca)
    return out
