import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multisoc import sim
from multisoc.config import ScenarioConfig
from multisoc.sim import ACTIVE, COLLIDED, REACHED, EpisodeLog, compute_metrics, compute_reward, \
    generate_scenario, sees_matrix, step_world, visibility_matrix

from helpers import make_world


def still_humans(world):
    return np.zeros((world.n_humans, 2))


# -- scenario generation --------------------------------------------------------

def test_lone_robot_scenario():
    cfg = ScenarioConfig(humans=0, robots=1)
    w = generate_scenario(cfg, np.random.default_rng(0))
    assert w.n == 1 and w.n_humans == 0
    assert np.linalg.norm(w.pos[0]) <= cfg.circle_radius
    assert np.linalg.norm(w.goal[0] - w.pos[0]) >= cfg.robot_min_goal_dist


def test_scenario_is_deterministic():
    cfg = ScenarioConfig(humans=20, robots=1)
    a = generate_scenario(cfg, np.random.default_rng(7))
    b = generate_scenario(cfg, np.random.default_rng(7))
    for name in ("pos", "goal", "heading", "kind", "radius"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.human_policy == b.human_policy


@pytest.mark.parametrize("policy", ["orca", "orca+sf"])
def test_human_goals_near_antipode(policy):
    cfg = ScenarioConfig(humans=20, robots=1, human_policy=policy)
    tol = 2 * math.sqrt(2) * cfg.human_noise + 1e-12
    for seed in range(100):
        w = generate_scenario(cfg, np.random.default_rng(seed))
        for h in w.human_ids:
            # both start and goal carry noise of at most human_noise per axis
            assert np.linalg.norm(w.goal[h] + w.pos[h]) <= tol
            assert abs(np.linalg.norm(w.pos[h]) - cfg.circle_radius) <= math.sqrt(2) * cfg.human_noise


def test_scenario_initial_clearance():
    cfg = ScenarioConfig(humans=10, robots=3)
    for seed in range(30):
        w = generate_scenario(cfg, np.random.default_rng(seed))
        d = np.linalg.norm(w.pos[:, None] - w.pos[None], axis=2)
        np.fill_diagonal(d, np.inf)
        assert np.all(d >= w.radius[:, None] + w.radius[None, :] + cfg.placement_margin - 1e-12)


def test_orca_sf_mix_assigns_both_kinds():
    cfg = ScenarioConfig(humans=20, robots=1, human_policy="orca+sf")
    w = generate_scenario(cfg, np.random.default_rng(3))
    kinds = {w.human_policy[h] for h in w.human_ids}
    assert kinds == {"orca", "sf"}


def test_impossible_placement_raises():
    cfg = ScenarioConfig(humans=0, robots=40, circle_radius=1.0, placement_retries=20)
    with pytest.raises(sim.ScenarioError):
        generate_scenario(cfg, np.random.default_rng(0))


# -- dynamics -------------------------------------------------------------------

def test_lone_robot_integration():
    cfg = ScenarioConfig(humans=0, robots=1)
    w = make_world(cfg, [[0, 0]], [[5, 0]], 1)
    step_world(w, {0: (1.0, 0.0)})
    assert np.allclose(w.pos[0], [0.25, 0.0], atol=1e-15)
    assert w.t == 1


def test_speed_is_clipped_to_preferred():
    cfg = ScenarioConfig(humans=0, robots=1)
    w = make_world(cfg, [[0, 0]], [[5, 0]], 1)
    step_world(w, {0: (3.0, 4.0)})
    assert math.isclose(np.linalg.norm(w.vel[0]), cfg.v_pref)
    assert np.allclose(w.pos[0], [0.15, 0.2])


def test_overlapping_pair_collides():
    cfg = ScenarioConfig(humans=0, robots=2)
    gap = 0.6 - 1e-6
    w = make_world(cfg, [[0, 0], [gap, 0]], [[0, 5], [gap, 5]], 2)
    _, rewards, events = step_world(w, {0: (0, 1), 1: (0, 1)})
    assert set(map(tuple, events.collisions)) == {(0, 1), (1, 0)}
    assert w.status[0] == COLLIDED and w.status[1] == COLLIDED
    assert rewards == {0: -20.0, 1: -20.0}


def test_goal_reached_and_episode_done():
    cfg = ScenarioConfig(humans=0, robots=1)
    w = make_world(cfg, [[0, 0]], [[0.4, 0]], 1)
    _, rewards, events = step_world(w, {0: (1, 0)})
    assert w.status[0] == REACHED and events.reached == [0]
    assert events.done
    assert math.isclose(rewards[0], 0.25)  # potential only, no bonus


def test_actions_for_inactive_or_unknown_robots_rejected():
    cfg = ScenarioConfig(humans=0, robots=2)
    w = make_world(cfg, [[0, 0], [3, 0]], [[0, 4], [3, 4]], 2)
    with pytest.raises(sim.ActionError):
        step_world(w, {0: (0, 1), 1: (0, 1), 5: (0, 0)})
    with pytest.raises(sim.ActionError):
        step_world(w, {0: (0, 1)})
    w.status[1] = REACHED
    with pytest.raises(sim.ActionError):
        step_world(w, {0: (0, 1), 1: (0, 1)})


def test_finished_robot_keeps_moving_toward_goal():
    cfg = ScenarioConfig(humans=0, robots=2)
    w = make_world(cfg, [[0, 0], [3, 0]], [[0, 4], [3, 4]], 2)
    w.status[1] = REACHED
    step_world(w, {0: (0, 0)})
    assert np.allclose(w.pos[1], [3, 0.25])
    assert w.status[1] == REACHED


def test_statuses_match_pairwise_replay_oracle():
    cfg = ScenarioConfig(humans=5, robots=3, circle_radius=3.0)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        w = generate_scenario(cfg, np.random.default_rng(100 + seed))
        trace, goals = [w.pos.copy()], w.goal[:3].copy()
        status_trace = []
        for _ in range(50):
            if w.done():
                break
            acts = {r: rng.uniform(-1, 1, 2) for r in w.active_robots()}
            step_world(w, acts)
            trace.append(w.pos.copy())
            status_trace.append(w.status[:3].copy())
        # independent replay: first step where a robot touches anything or sits on its goal
        expected = [ACTIVE] * 3
        for t, pos in enumerate(trace[1:]):
            for r in range(3):
                if expected[r] != ACTIVE:
                    continue
                touching = any(math.dist(pos[r], pos[k]) < 0.6 for k in range(len(pos)) if k != r)
                if touching:
                    expected[r] = COLLIDED
                elif math.dist(pos[r], goals[r]) <= cfg.goal_radius:
                    expected[r] = REACHED
            assert list(status_trace[t]) == expected


def test_status_transitions_are_monotone():
    cfg = ScenarioConfig(humans=6, robots=3, circle_radius=3.0)
    w = generate_scenario(cfg, np.random.default_rng(11))
    rng = np.random.default_rng(1)
    prev = w.status.copy()
    while not w.done():
        step_world(w, {r: rng.uniform(-1, 1, 2) for r in w.active_robots()})
        changed = prev != w.status
        assert np.all(prev[changed] == ACTIVE)
        prev = w.status.copy()
    assert w.t <= cfg.max_steps


# -- visibility -----------------------------------------------------------------

def test_full_fov_rows_are_all_ones():
    cfg = ScenarioConfig(humans=3, robots=1, fov_deg=360, human_fov_deg=360, sensor_range=50,
                         human_sensor_range=50)
    w = generate_scenario(cfg, np.random.default_rng(2))
    assert visibility_matrix(w, 0).all()


def test_entity_behind_is_invisible_under_half_fov():
    cfg = ScenarioConfig(humans=2, robots=1, human_fov_deg=180)
    # human 1 faces +x, human 2 sits behind it
    w = make_world(cfg, [[0, 1], [1, 0], [-1, 0]], [[0, 2], [5, 0], [-5, 0]], 1,
                   headings=[math.pi / 2, 0.0, math.pi])
    m = visibility_matrix(w, 0)
    assert not m[1, 2]
    assert m[0, 1] and m[0, 2]


def angle_oracle(w, i, k):
    if i == k:
        return True
    dx, dy = w.pos[k] - w.pos[i]
    d = math.hypot(dx, dy)
    if d > w.sensor_range[i]:
        return False
    rel = math.atan2(dy, dx) - w.heading[i]
    rel = (rel + math.pi) % (2 * math.pi) - math.pi
    return abs(rel) <= w.fov[i] / 2 + 1e-12


@pytest.mark.parametrize("seed", range(25))
def test_visibility_matches_geometric_oracle(seed):
    rng = np.random.default_rng(seed)
    cfg = ScenarioConfig(humans=4, robots=2, fov_deg=120, human_fov_deg=120, sensor_range=4,
                         human_sensor_range=4)
    pos = rng.uniform(-3, 3, (6, 2))
    w = make_world(cfg, pos, rng.uniform(-3, 3, (6, 2)), 2, headings=rng.uniform(-math.pi, math.pi, 6))
    for j in (0, 1):
        m = visibility_matrix(w, j)
        for i in range(6):
            for k in range(6):
                want = angle_oracle(w, j, i) and angle_oracle(w, j, k) and angle_oracle(w, i, k)
                assert m[i, k] == want
        hidden = [i for i in range(6) if not angle_oracle(w, j, i)]
        assert not m[hidden].any() and not m[:, hidden].any()


def test_visibility_can_be_asymmetric():
    cfg = ScenarioConfig(humans=1, robots=1, fov_deg=360, human_fov_deg=90)
    w = make_world(cfg, [[0, 0], [1, 0]], [[0, 3], [3, 0]], 1, headings=[0.0, 0.0])
    m = visibility_matrix(w, 0)
    assert m[0, 1] and not m[1, 0]


def test_visibility_rejects_human_agent():
    cfg = ScenarioConfig(humans=1, robots=1)
    w = make_world(cfg, [[0, 0], [1, 0]], [[0, 3], [3, 0]], 1)
    with pytest.raises(ValueError):
        visibility_matrix(w, 1)


# -- reward ---------------------------------------------------------------------

def reward_world(robot_pos, goal, others, prev_others=None, cfg=None):
    cfg = cfg or ScenarioConfig(humans=len(others), robots=1)
    pos = [robot_pos] + list(others)
    prev = [robot_pos] + list(prev_others if prev_others is not None else others)
    w = make_world(cfg, pos, [goal] + [[9, 9]] * len(others), 1, prev=prev)
    w.predictions = sim.predict_positions(w.pos, w.prev_pos, w.dt, 5)
    return w


def test_reward_collision_is_minus_twenty():
    w = reward_world([0, 0], [5, 0], [[0.5, 0]])
    assert compute_reward(5.5, w, 0, w.predictions) == -20.0


def test_reward_pure_potential():
    w = reward_world([0.5, 0], [5, 0], [[0, 4]])
    assert math.isclose(compute_reward(5.0, w, 0, w.predictions), 0.5, abs_tol=1e-12)


def test_reward_single_overlap_at_second_horizon():
    # human 1.0 m away closing 0.3 m per step: centre distances 0.7 (k=1), 0.4 (k=2)
    w = reward_world([0, 0], [0, 5], [[1.0, 0]], prev_others=[[1.3, 0]])
    r = compute_reward(5.1, w, 0, w.predictions)
    assert math.isclose(r, 0.1 - 5.0, abs_tol=1e-12)


def test_reward_takes_most_negative_overlap():
    # one human hits at k=1, another only at k=3
    w = reward_world([0, 0], [0, 5], [[0.8, 0], [0, -2.0]], prev_others=[[1.1, 0], [0, -2.5]])
    assert math.isclose(compute_reward(5.0, w, 0, w.predictions), -10.0, abs_tol=1e-12)


def brute_force_reward(w, before_dist, j, rc=-20.0):
    n = w.n
    for i in range(n):
        if i != j and math.dist(w.pos[i], w.pos[j]) < w.radius[i] + w.radius[j]:
            return rc
    r_pot = before_dist - float(np.linalg.norm(w.goal[j] - w.pos[j]))
    best = 0.0
    step = w.pos - w.prev_pos
    for i in range(n):
        if i == j or not angle_oracle(w, j, i):
            continue
        for k in range(1, 6):
            p = w.pos[i] + k * step[i]
            if math.dist(p, w.pos[j]) < w.radius[i] + w.radius[j]:
                best = min(best, rc / 2 ** k)
    return r_pot + best


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_reward_matches_brute_force_property(seed):
    rng = np.random.default_rng(seed)
    n_h = int(rng.integers(0, 6))
    cfg = ScenarioConfig(humans=n_h, robots=2, fov_deg=float(rng.choice([120, 360])))
    pos = rng.uniform(-2.5, 2.5, (2 + n_h, 2))
    prev = pos - rng.uniform(-0.4, 0.4, pos.shape)
    w = make_world(cfg, pos, rng.uniform(-3, 3, pos.shape), 2, prev=prev,
                   headings=rng.uniform(-math.pi, math.pi, 2 + n_h))
    w.predictions = sim.predict_positions(w.pos, w.prev_pos, w.dt, 5)
    before = float(rng.uniform(0, 6))
    for j in (0, 1):
        r = compute_reward(before, w, j, w.predictions)
        assert r == brute_force_reward(w, before, j)
        assert -20.0 <= r


def test_reward_prediction_penalty_bounds():
    rng = np.random.default_rng(4)
    cfg = ScenarioConfig(humans=4, robots=1)
    for _ in range(300):
        pos = rng.uniform(-2, 2, (5, 2))
        w = make_world(cfg, pos, rng.uniform(-3, 3, (5, 2)), 1,
                       prev=pos - rng.uniform(-0.4, 0.4, (5, 2)))
        preds = sim.predict_positions(w.pos, w.prev_pos, w.dt, 5)
        p = sim.prediction_penalty(w, 0, preds, sees_matrix(w)[0], -20.0)
        assert -10.0 <= p <= 0.0


def test_one_step_reward_upper_bound():
    cfg = ScenarioConfig(humans=3, robots=2)
    rng = np.random.default_rng(8)
    for seed in range(20):
        w = generate_scenario(cfg, np.random.default_rng(seed))
        while not w.done():
            _, rewards, _ = step_world(w, {r: rng.uniform(-2, 2, 2) for r in w.active_robots()})
            for r in rewards.values():
                assert -20.0 <= r <= cfg.v_pref * cfg.dt + 1e-12


def test_reward_path_has_no_goal_bonus():
    cfg = ScenarioConfig(humans=0, robots=1)
    w = make_world(cfg, [[0, 0]], [[0.2, 0]], 1)
    _, rewards, _ = step_world(w, {0: (0.8, 0)})
    assert w.status[0] == REACHED
    assert math.isclose(rewards[0], 0.2, abs_tol=1e-12)


# -- metrics --------------------------------------------------------------------

def synthetic_log(positions, statuses, rewards, acted, dt=0.25):
    kind = np.array([sim.ROBOT, sim.HUMAN])
    log = EpisodeLog(dt=dt, kind=kind, radius=np.array([0.3, 0.3]))
    for p, s, r, a in zip(positions, statuses, rewards, acted):
        log.positions.append(np.asarray(p, float))
        log.velocities.append(np.zeros((2, 2)))
        log.goals.append(np.zeros((2, 2)))
        log.statuses.append(np.array([s, ACTIVE]))
        log.rewards.append(np.array([r]))
        log.acted.append(np.array([a]))
        log.visible.append(np.ones(2, bool))
    return log


def three_episode_logs():
    # reaches at t=2 after one intrusive step, then touches the human while finished
    a = synthetic_log([[[0, 0], [1, 0.7]], [[1, 0], [1, 0.7]], [[2, 0], [1, 0.7]], [[1, 0.6], [1, 0.7]]],
                      [ACTIVE, ACTIVE, REACHED, REACHED], [0, 1.0, 0.8, 0], [False, True, True, False])
    # collides on the first step
    b = synthetic_log([[[0, 0], [0.6, 0]], [[0.5, 0], [0.6, 0]]],
                      [ACTIVE, COLLIDED], [0, -20.0], [False, True])
    # times out after three steps far from anyone
    c = synthetic_log([[[0, 0], [10, 10]], [[0, 1], [10, 10]], [[0, 2], [10, 10]], [[0, 2], [10, 10]]],
                      [ACTIVE] * 4, [0, 0.5, 0.5, 0.0], [False, True, True, True])
    return [a, b, c]


def test_metrics_match_hand_computed_report():
    rep = compute_metrics(three_episode_logs(), 0.25)
    assert math.isclose(rep.success, 1 / 3)
    assert math.isclose(rep.collision, 1 / 3)
    assert math.isclose(rep.timeout, 1 / 3)
    assert math.isclose(rep.intrusion_ratio, (50 + 100 + 0) / 3)
    assert math.isclose(rep.travel_time, (0.5 + 0.25 + 0.75) / 3)
    assert math.isclose(rep.travel_length, (2 + 0.5 + 2) / 3)
    assert math.isclose(rep.reward, (1.8 - 20 + 1.0) / 3)
    assert rep.episodes == 3 and rep.robots == 3


def test_metrics_all_reach_no_humans():
    cfg = ScenarioConfig(humans=0, robots=2)
    logs = []
    for seed in range(3):
        w = generate_scenario(cfg, np.random.default_rng(seed))
        log = EpisodeLog.start(w)
        while not w.done():
            acts = {r: sim.scripted_goal_velocity(w.pos[r], w.goal[r], 1.0, w.dt) for r in w.active_robots()}
            _, rew, _ = step_world(w, acts)
            log.record(w, rew)
        logs.append(log)
    rep = compute_metrics(logs, 0.25)
    assert rep.success == 1.0 and rep.collision == 0.0 and rep.intrusion_ratio == 0.0


def test_metrics_one_of_two_collides_immediately():
    w = make_world(ScenarioConfig(humans=1, robots=2, max_steps=1),
                   [[0, 0], [3, 0], [0.4, 0]], [[0, 5], [3, 0.2], [0.4, 0]], 2)
    log = EpisodeLog.start(w)
    _, rew, _ = step_world(w, {0: (0, 0), 1: (0, 1)}, human_policy=still_humans)
    log.record(w, rew)
    rep = compute_metrics([log], 0.25)
    assert rep.success == 0.5 and rep.collision == 0.5


def test_metrics_need_logs():
    with pytest.raises(ValueError):
        compute_metrics([], 0.25)


def test_report_columns_and_table():
    rep = compute_metrics(three_episode_logs(), 0.25)
    assert sim.MetricsReport.COLUMNS == ("success", "collision", "intrusion_ratio", "travel_time",
                                         "travel_length", "reward")
    head = rep.table().splitlines()[0]
    order = [head.index(c) for c in ("Success", "Collision", "Intrusion", "Travel Time",
                                     "Travel Length", "Reward")]
    assert order == sorted(order)


# -- episode CSV ----------------------------------------------------------------

def run_logged_episode(seed=0, steps=20):
    cfg = ScenarioConfig(humans=3, robots=2)
    w = generate_scenario(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    log = EpisodeLog.start(w)
    for _ in range(steps):
        if w.done():
            break
        _, rew, _ = step_world(w, {r: rng.uniform(-1, 1, 2) for r in w.active_robots()})
        log.record(w, rew)
    return log


def test_episode_csv_roundtrip(tmp_path):
    log = run_logged_episode()
    path = tmp_path / "ep.csv"
    sim.write_episode_csv(log, path)
    meta, rows = sim.read_episode_csv(path)
    assert meta["dt"] == 0.25
    assert len(rows) == len(log.positions) * log.kind.shape[0]
    last = rows[-1]
    t, i = last["t"], last["entity_id"]
    assert last["x"] == log.positions[t][i][0] and last["y"] == log.positions[t][i][1]
    assert {r["kind"] for r in rows} == {"robot", "human"}


def test_episode_csv_malformed_row_names_line(tmp_path):
    log = run_logged_episode(steps=2)
    path = tmp_path / "ep.csv"
    sim.write_episode_csv(log, path)
    lines = path.read_text().splitlines()
    cells = lines[6].split(",")
    cells[3] = "notanumber"
    lines[6] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match=":7:"):
        sim.read_episode_csv(path)


def test_episode_is_deterministic():
    a, b = run_logged_episode(5, 40), run_logged_episode(5, 40)
    assert all(np.array_equal(x, y) for x, y in zip(a.positions, b.positions))
    assert all(np.array_equal(x, y) for x, y in zip(a.rewards, b.rewards))


def test_entity_state_validation():
    with pytest.raises(ValueError):
        sim.EntityState(0, sim.ROBOT, np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2), 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        sim.EntityState(0, sim.ROBOT, np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2), 0.0, 0.3, 0.0)
