"""Floor simulator: worked reward examples, process mechanics, and audits."""

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from totegame.env_sim import (
    Action,
    DayBoundaryError,
    EpisodeOver,
    Occupancy,
    Role,
    SimConfig,
    Station,
    WarehouseSim,
    decode_action,
    encode_observation,
    end_of_day,
    max_signal,
    observation_bounds,
    raw_observation,
    read_trace,
    reset,
    scale_observation,
    simulate_step,
    step,
    trace_episode,
    warehouse_constraints,
)
from totegame.mdp_core import rollout

SPEC = warehouse_constraints()

SRC_H = Action(False, Role.SOURCE, Station.HUMAN)
SRC_R = Action(False, Role.SOURCE, Station.ROBOT)
DST_H = Action(False, Role.DESTINATION, Station.HUMAN)
DST_R = Action(False, Role.DESTINATION, Station.ROBOT)
IGNORE = Action(True)


def quiet_config(**overrides):
    """Small floor with every stochastic process switched off."""
    base = dict(
        floor_max=8,
        steps_per_day=100,
        n_days=1,
        human_rate=0.0,
        robot_rate=0.0,
        stow_rate=0.0,
        pick_fraction=0.0,
        init_fill_fraction=1.0,
        init_large_fraction=0.5,
    )
    base.update(overrides)
    return SimConfig(**base)


# --- config -----------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(floor_max=0)
    with pytest.raises(ValueError):
        SimConfig(pick_fraction=1.5)
    with pytest.raises(ValueError):
        SimConfig(human_rate=-1.0)
    with pytest.raises(ValueError):
        SimConfig(item_max=20, tote_capacity=12)
    with pytest.raises(ValueError):
        SimConfig(etph_window_hours=0.0)


def test_config_clock():
    cfg = SimConfig()
    assert cfg.horizon == 14400
    assert cfg.dt_hours == pytest.approx(1.0 / 60.0)
    assert cfg.window_steps == 60


def test_max_signal_is_population_bound():
    cfg = SimConfig(floor_max=50, n_days=3, steps_per_day=10)
    assert max_signal(cfg) == 200.0


# --- actions ----------------------------------------------------------------


def test_action_index_roundtrip():
    seen = set()
    for i in range(8):
        act = Action.from_index(i)
        assert act.index == i
        seen.add((act.ignore, act.role, act.station))
    assert len(seen) == 8
    assert Action(False, Role.DESTINATION, Station.ROBOT).index == 3


def test_ignore_aliases():
    for i in range(4, 8):
        assert Action.from_index(i).ignore
    for i in range(4):
        assert not Action.from_index(i).ignore


def test_decode_collapsed():
    acts = [decode_action(i, True) for i in range(5)]
    assert acts[4].ignore
    assert [(a.role, a.station) for a in acts[:4]] == [
        (Role.SOURCE, Station.HUMAN),
        (Role.SOURCE, Station.ROBOT),
        (Role.DESTINATION, Station.HUMAN),
        (Role.DESTINATION, Station.ROBOT),
    ]
    with pytest.raises(ValueError):
        decode_action(5, True)
    with pytest.raises(ValueError):
        decode_action(8, False)


# --- reset ------------------------------------------------------------------


def test_reset_all_large():
    cfg = SimConfig(floor_max=100, steps_per_day=10, n_days=1, init_large_fraction=1.0)
    state = reset(cfg, 7)
    occupied = state.occupancy != Occupancy.EMPTY
    assert np.all(state.occupancy[occupied] == Occupancy.LARGE)
    assert state.n_large == int(occupied.sum())
    assert state.cursor == 0 and state.t == 0 and state.etph == 0.0
    assert state.queue_lengths == (0, 0, 0, 0)


def test_reset_deterministic():
    cfg = SimConfig(floor_max=64, steps_per_day=10, n_days=1)
    a, b = reset(cfg, 123), reset(cfg, 123)
    for name in ("occupancy", "n_item", "n_pick", "dest_station"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.rng.bit_generator.state == b.rng.bit_generator.state


def test_reset_large_fraction_monte_carlo():
    cfg = SimConfig(floor_max=100, steps_per_day=10, n_days=1, init_large_fraction=0.5)
    fractions = []
    for seed in range(1000):
        state = reset(cfg, seed)
        occupied = int((state.occupancy != Occupancy.EMPTY).sum())
        fractions.append(state.n_large / occupied)
    assert abs(np.mean(fractions) - 0.5) < 0.05


def test_reset_slot_invariants():
    state = reset(SimConfig(floor_max=200, steps_per_day=10, n_days=1), 4)
    empty = state.occupancy == Occupancy.EMPTY
    assert (state.n_item[empty] == 0).all() and (state.n_pick[empty] == 0).all()
    assert (state.n_item[~empty] >= 1).all()
    assert (state.n_pick <= state.n_item).all()


# --- step: worked reward examples -------------------------------------------


def test_human_source_dispatch_reward():
    # Queues all zero, alpha_3 = 10, H = 100: one (Source, Human) dispatch
    # leaves L^H_S = 1, so r_3 = (10 - 1)/100.
    spec = warehouse_constraints(alpha=(0.6, 1.0, 10.0, 25.0))
    state = reset(quiet_config(), 3)
    state, reward = step(state, SRC_H, spec)
    assert state.queue_lengths == (1, 0, 0, 0)
    assert reward[3] == 0.09


def test_ratio_reward_after_noop_tick():
    # Build L^H_S=2, L^R_S=2, L^H_D=0, L^R_D=1, then a no-op service tick:
    # r_2 = (-1 + 4/2)/100.
    spec = warehouse_constraints(alpha=(0.6, 1.0, 10.0, 25.0))
    state = reset(quiet_config(), 3)
    for act in (SRC_H, SRC_H, SRC_R, SRC_R, DST_R):
        state, _ = step(state, act, spec)
    assert state.queue_lengths == (2, 0, 2, 1)
    state, reward = step(state, IGNORE, spec)
    assert reward[2] == 0.01


def test_ignore_is_noop():
    state = reset(quiet_config(human_rate=5.0, robot_rate=5.0), 1)
    snapshot = (
        state.occupancy.copy(),
        state.n_item.copy(),
        state.n_pick.copy(),
        state.n_large,
        state.queue_lengths,
    )
    state, _ = step(state, IGNORE, SPEC)
    assert np.array_equal(state.occupancy, snapshot[0])
    assert np.array_equal(state.n_item, snapshot[1])
    assert np.array_equal(state.n_pick, snapshot[2])
    assert state.n_large == snapshot[3]
    assert state.queue_lengths == snapshot[4]
    assert state.cursor == 1 and state.t == 1


def test_action_on_empty_slot_is_inert():
    state = reset(quiet_config(init_fill_fraction=0.0), 0)
    state, _ = step(state, SRC_H, SPEC)
    assert state.queue_lengths == (0, 0, 0, 0)


def test_source_dispatch_moves_tote():
    state = reset(quiet_config(init_large_fraction=1.0), 2)
    items = int(state.n_item[0])
    n_large = state.n_large
    state, _ = step(state, SRC_R, SPEC)
    assert state.n_large == n_large - 1
    assert state.occupancy[0] == Occupancy.EMPTY and state.n_item[0] == 0
    assert list(state.src_queues[Station.ROBOT]) == [items]


def test_destination_registration():
    state = reset(quiet_config(init_large_fraction=0.0), 2)
    state.n_item[0] = 5
    state.n_pick[0] = 3
    state, _ = step(state, DST_H, SPEC)
    assert state.dest_station[0] == Station.HUMAN
    assert state.queue_lengths == (0, 1, 0, 0)
    assert state.occupancy[0] == Occupancy.SMALL
    # committing to consolidation cancels the scheduled picks
    assert state.n_pick[0] == 0


def test_registered_destination_is_inert():
    state = reset(quiet_config(init_large_fraction=0.0), 2)
    state.n_item[:] = 5
    state.n_pick[:] = 0
    state, _ = step(state, DST_H, SPEC)
    state.cursor = 0
    state, _ = step(state, SRC_H, SPEC)
    assert state.queue_lengths == (0, 1, 0, 0)
    assert state.occupancy[0] == Occupancy.SMALL


def test_cursor_wraps():
    cfg = quiet_config(floor_max=3, steps_per_day=10)
    state = reset(cfg, 0)
    for expected in (1, 2, 0, 1):
        state, _ = step(state, IGNORE, SPEC)
        assert state.cursor == expected


def test_episode_over():
    cfg = quiet_config(steps_per_day=2)
    state = reset(cfg, 0)
    for _ in range(2):
        state, _ = step(state, IGNORE, SPEC)
    with pytest.raises(EpisodeOver):
        step(state, IGNORE, SPEC)


# --- station service --------------------------------------------------------


def test_human_service_empties_tote():
    # steps_per_day=24 makes dt one hour, so human_rate=1 is one tote per step.
    cfg = quiet_config(steps_per_day=24, human_rate=1.0, init_large_fraction=0.0)
    state = reset(cfg, 5)
    state.n_item[:] = 3
    state.n_pick[:] = 0
    state, _ = step(state, DST_H, SPEC)
    state, reward, events = simulate_step(state, SRC_H, SPEC)
    assert events.emptied == 1 and events.transferred == 3
    assert state.queue_lengths == (0, 1, 0, 0)
    # one tote emptied inside a one-hour window
    assert state.etph == 1.0 and reward[0] == 1.0


def test_destination_ejects_when_full():
    cfg = quiet_config(steps_per_day=24, human_rate=1.0, init_large_fraction=0.0)
    state = reset(cfg, 2)
    state.n_item[:] = 11
    state.n_pick[:] = 0
    state, _ = step(state, DST_H, SPEC)  # destination at 11/12
    state.n_item[1] = 2
    state, _, events = simulate_step(state, SRC_H, SPEC)
    # one item tops the destination off (12/12 >= 0.95) and ships it out;
    # the source tote keeps its last item since no destination space remains
    assert events.ejected_totes == 1 and events.ejected_items == 12
    assert events.emptied == 0
    assert state.occupancy[0] == Occupancy.EMPTY and state.dest_counts[0] == 0
    assert list(state.src_queues[Station.HUMAN]) == [1]


def test_full_tote_registration_ships_immediately():
    state = reset(quiet_config(init_large_fraction=0.0), 2)
    state.n_item[:] = 12
    state.n_pick[:] = 0
    state, _, events = simulate_step(state, DST_R, SPEC)
    assert events.ejected_totes == 1
    assert state.occupancy[0] == Occupancy.EMPTY
    assert state.queue_lengths == (0, 0, 0, 0)


def test_blocked_station_keeps_queue():
    # no registered destinations: the queue must sit untouched
    cfg = quiet_config(steps_per_day=24, human_rate=5.0)
    state = reset(cfg, 1)
    state, _ = step(state, SRC_H, SPEC)
    for _ in range(5):
        state, _ = step(state, IGNORE, SPEC)
    assert len(state.src_queues[Station.HUMAN]) == 1
    assert state.work_acc[Station.HUMAN] <= 1.0


def test_robot_failures_requeue_to_human():
    # 12-item totes give LTE = 1/12, so most attempts bounce; every bounce
    # must land in the human source queue with its item count intact.
    bounced = emptied = human_received = 0
    for seed in range(40):
        cfg = quiet_config(
            floor_max=4, steps_per_day=24, robot_rate=1.0, init_large_fraction=0.0,
            tote_capacity=24,
        )
        state = reset(cfg, seed)
        state.n_item[:] = 12
        state.n_pick[:] = 0
        state.n_item[0] = 3  # destination with space for a full source tote
        state, _, _ = simulate_step(state, DST_R, SPEC)
        state, _, ev_dispatch = simulate_step(state, SRC_R, SPEC)
        state, _, ev_tick = simulate_step(state, IGNORE, SPEC)
        bounced += ev_dispatch.bounced + ev_tick.bounced
        emptied += ev_dispatch.emptied + ev_tick.emptied
        if ev_dispatch.bounced or ev_tick.bounced:
            human_received += int(list(state.src_queues[Station.HUMAN]) == [12])
    assert bounced + emptied == 40
    assert bounced >= 25  # P(bounce) = 11/12 per attempt
    assert human_received == bounced


# --- end of day -------------------------------------------------------------


def test_end_of_day_mid_day_rejected():
    state = reset(quiet_config(), 1)
    with pytest.raises(DayBoundaryError):
        end_of_day(state)
    state, _ = step(state, IGNORE, SPEC)
    with pytest.raises(DayBoundaryError):
        end_of_day(state)


def test_day_boundary_runs_automatically():
    cfg = quiet_config(floor_max=30, steps_per_day=3, n_days=2, stow_rate=4.0,
                       init_fill_fraction=0.2)
    state = reset(cfg, 6)
    stowed = 0
    for _ in range(3):
        state, _, events = simulate_step(state, IGNORE, SPEC)
        stowed += events.stowed_totes
    assert events.day_end and state.day_step == 0 and state.t == 3
    assert stowed > 0


def test_shuffle_only_day_permutes_contents():
    cfg = quiet_config(floor_max=50, steps_per_day=4, n_days=2, init_fill_fraction=0.7)
    state = reset(cfg, 8)
    before = sorted(zip(state.occupancy.tolist(), state.n_item.tolist(), state.n_pick.tolist()))
    for _ in range(4):
        state, _ = step(state, IGNORE, SPEC)
    after = sorted(zip(state.occupancy.tolist(), state.n_item.tolist(), state.n_pick.tolist()))
    assert before == after


def test_full_pick_fraction_clears_picks():
    cfg = quiet_config(floor_max=50, steps_per_day=4, n_days=2, stow_rate=5.0,
                       pick_fraction=1.0, init_fill_fraction=0.7)
    state = reset(cfg, 8)
    assert (state.n_pick > 0).any()
    for _ in range(4):
        state, _ = step(state, IGNORE, SPEC)
    assert (state.n_pick == 0).all()


def test_picks_empty_totes_consistently():
    cfg = quiet_config(floor_max=80, steps_per_day=2, n_days=3, pick_fraction=1.0,
                       init_fill_fraction=0.9)
    state = reset(cfg, 3)
    fully_scheduled = int((state.n_pick == state.n_item).sum())
    for _ in range(2):
        state, _ = step(state, IGNORE, SPEC)
    empty = state.occupancy == Occupancy.EMPTY
    assert (state.n_item[empty] == 0).all() and (state.n_pick[empty] == 0).all()
    assert state.n_large == int((state.occupancy == Occupancy.LARGE).sum())
    assert int(empty.sum()) >= fully_scheduled


def test_stow_totals_match_arrival_law():
    # 10 days at stow_rate=30 on a roomy floor: total within 3 sigma of 300.
    cfg = SimConfig(
        floor_max=2000, steps_per_day=4, n_days=10, stow_rate=30.0, pick_fraction=1.0,
        human_rate=0.0, robot_rate=0.0, init_fill_fraction=0.1,
    )
    state = reset(cfg, 0)
    total = 0
    for _ in range(cfg.horizon):
        state, _, events = simulate_step(state, IGNORE, SPEC)
        total += events.stowed_totes
    assert abs(total - 300) <= 3 * math.sqrt(300)


# --- observations -----------------------------------------------------------


def test_empty_slot_observation():
    state = reset(quiet_config(init_fill_fraction=0.0), 0)
    obs = encode_observation(state)
    assert obs[6] == 0.0 and obs[7] == 1.0 and obs[8] == 0.0


def test_lte_from_item_count():
    state = reset(quiet_config(init_large_fraction=0.0), 0)
    state.n_item[0] = 4
    assert raw_observation(state)[7] == 0.25


def test_occupancy_encoding():
    state = reset(quiet_config(init_large_fraction=1.0), 0)
    assert raw_observation(state)[6] == 1.0
    state.occupancy[0] = Occupancy.SMALL
    state.n_large -= 1
    assert raw_observation(state)[6] == 2.0
    assert encode_observation(state)[6] == 1.0


def test_time_component_saturates():
    cfg = quiet_config()
    state = reset(cfg, 0)
    state.t = cfg.horizon
    assert encode_observation(state)[11] == 1.0


def test_scaled_observation_in_unit_box():
    cfg = SimConfig(floor_max=30, steps_per_day=30, n_days=2, human_rate=4.0,
                    robot_rate=7.0, stow_rate=6.0)
    state = reset(cfg, 5)
    rng = np.random.default_rng(0)
    for _ in range(cfg.horizon):
        state, _ = step(state, Action.from_index(int(rng.integers(0, 8))), SPEC)
        obs = encode_observation(state)
        assert obs.shape == (12,)
        assert (obs >= 0.0).all() and (obs <= 1.0).all()


def test_scaling_is_invertible_in_range():
    state = reset(SimConfig(floor_max=40, steps_per_day=20, n_days=1), 9)
    raw = raw_observation(state)
    bounds = observation_bounds(state.config)
    assert np.allclose(scale_observation(raw, state.config) * bounds, raw)


# --- reward bounds ----------------------------------------------------------

def test_reward_bounds():
    cfg = SimConfig(floor_max=25, steps_per_day=40, n_days=2, human_rate=5.0,
                    robot_rate=8.0, stow_rate=10.0)
    cap = (np.abs(SPEC.alpha) + max_signal(cfg)) / cfg.horizon
    state = reset(cfg, 11)
    rng = np.random.default_rng(1)
    for _ in range(cfg.horizon):
        state, reward = step(state, Action.from_index(int(rng.integers(0, 8))), SPEC)
        assert reward[0] >= 0.0
        assert (np.abs(reward[1:]) <= cap).all()


def test_step_rejects_wrong_spec_width():
    from totegame.regulator import ConstraintSpec

    bad = ConstraintSpec(alpha=np.zeros(2), sign=np.ones(2), cap=1.0)
    state = reset(quiet_config(), 0)
    with pytest.raises(ValueError):
        step(state, IGNORE, bad)


# --- conservation and recomputability ---------------------------------------


@settings(deadline=None)
@given(
    actions=st.lists(st.integers(0, 7), min_size=20, max_size=60),
    seed=st.integers(0, 2**31 - 1),
)
def test_item_conservation(actions, seed):
    # Items enter via stow and leave via picks or shipped destinations;
    # a step with no completed service and no day boundary conserves them.
    cfg = SimConfig(floor_max=20, steps_per_day=25, n_days=3, human_rate=6.0,
                    robot_rate=9.0, stow_rate=5.0, pick_fraction=0.6)
    state = reset(cfg, seed)
    for index in actions:
        before = state.total_items
        state, _, events = simulate_step(state, Action.from_index(index), SPEC)
        after = state.total_items
        assert after == before + events.stowed_items - events.picked_items - events.ejected_items
        if events.emptied == 0 and events.ejected_totes == 0 and not events.day_end:
            assert after == before
        assert (state.n_pick <= state.n_item).all()
        empty = state.occupancy == Occupancy.EMPTY
        assert (state.n_item[empty] == 0).all()
        assert state.n_large == int((state.occupancy == Occupancy.LARGE).sum())
        assert state.queue_lengths[1] == int((state.dest_station == Station.HUMAN).sum())
        assert state.queue_lengths[3] == int((state.dest_station == Station.ROBOT).sum())


def test_trace_shadow_accounting(tmp_path):
    # etph and n_large must be recomputable from the trace alone: etph from
    # the rolling emptied counts, n_large by inverting the r_1 slack.
    cfg = SimConfig(floor_max=30, steps_per_day=48, n_days=2, human_rate=5.0,
                    robot_rate=8.0, stow_rate=8.0, pick_fraction=0.5,
                    etph_window_hours=0.5)
    path = tmp_path / "episode.ndjson"
    rng = np.random.default_rng(3)

    def policy(obs, t, policy_rng):
        return int(policy_rng.integers(0, 8))

    with open(path, "w") as handle:
        trace_episode(handle, cfg, SPEC, policy, 17)
    header, rows = read_trace(path)
    assert header["config"]["floor_max"] == 30
    assert len(rows) == cfg.horizon

    window = cfg.window_steps
    emptied = [row["emptied"] for row in rows]
    for i, row in enumerate(rows):
        start = max(0, i - window + 1)
        assert row["etph"] == sum(emptied[start : i + 1]) / cfg.etph_window_hours
        recovered = cfg.floor_max * (SPEC.alpha[0] - cfg.horizon * row["reward_vector"][1])
        assert round(recovered) == row["n_large"]


def test_trace_byte_determinism():
    cfg = SimConfig(floor_max=30, steps_per_day=60, n_days=2, human_rate=3.0,
                    robot_rate=5.0, stow_rate=6.0, pick_fraction=0.6)

    def policy(obs, t, policy_rng):
        return int(policy_rng.integers(0, 8))

    first, second = io.StringIO(), io.StringIO()
    v1 = trace_episode(first, cfg, SPEC, policy, 11)
    v2 = trace_episode(second, cfg, SPEC, policy, 11)
    assert first.getvalue() == second.getvalue()
    assert np.array_equal(v1, v2)


def test_read_trace_rejects_foreign_schema(tmp_path):
    path = tmp_path / "bad.ndjson"
    path.write_text('{"schema": "something-else"}\n')
    with pytest.raises(ValueError):
        read_trace(path)


# --- protocol adapter -------------------------------------------------------


def test_warehouse_sim_protocol():
    cfg = SimConfig(floor_max=15, steps_per_day=20, n_days=1, human_rate=4.0,
                    robot_rate=6.0, stow_rate=4.0)
    sim = WarehouseSim(cfg, SPEC)
    assert (sim.horizon, sim.n_actions, sim.reward_dim) == (20, 8, 5)

    class RandomPolicy:
        def act(self, obs, step_index, rng):
            return int(rng.integers(0, 8))

    traj = rollout(sim, RandomPolicy(), seed=4)
    assert traj.rewards.shape == (20, 5)
    assert traj.returns[0] >= 0.0
    feats = sim.features_from_obs(traj.observations[3], 3)
    assert feats.shape == (12,) and (feats >= 0.0).all() and (feats <= 1.0).all()


def test_collapsed_action_space():
    cfg = SimConfig(floor_max=10, steps_per_day=10, n_days=1, collapse_actions=True)
    sim = WarehouseSim(cfg, SPEC)
    assert sim.n_actions == 5
    state = sim.init_state(0)
    state, reward = sim.step(state, 4)
    assert reward.shape == (5,)
    assert state.queue_lengths == (0, 0, 0, 0)


def test_rollout_matches_manual_drive():
    cfg = SimConfig(floor_max=12, steps_per_day=15, n_days=1, human_rate=3.0,
                    robot_rate=4.0, stow_rate=2.0)
    sim = WarehouseSim(cfg, SPEC)

    class CyclePolicy:
        def act(self, obs, step_index, rng):
            return step_index % 8

    traj = rollout(sim, CyclePolicy(), seed=9)
    state = sim.init_state(9)
    totals = np.zeros(5)
    for t in range(cfg.horizon):
        state, reward = sim.step(state, t % 8)
        totals += reward
    assert np.array_equal(traj.returns, totals)


# --- throughput response ----------------------------------------------------


def test_etph_monotone_in_human_rate():
    # Human-only service on a deterministic floor (no robot draws, no
    # overnight noise): per-seed emptied totals must be nondecreasing in
    # the service rate.  A huge tote_capacity rules out destination churn.
    def run(rate, seed):
        cfg = SimConfig(floor_max=60, steps_per_day=48, n_days=1, human_rate=rate,
                        robot_rate=0.0, stow_rate=0.0, pick_fraction=0.0,
                        init_fill_fraction=1.0, tote_capacity=200, item_max=12)
        state = reset(cfg, seed)
        emptied = 0
        for t in range(cfg.horizon):
            action = DST_H if t % 8 == 0 else SRC_H
            state, _, events = simulate_step(state, action, SPEC)
            emptied += events.emptied
        return emptied

    for seed in range(12):
        low, mid, high = run(1.0, seed), run(2.0, seed), run(4.0, seed)
        assert low <= mid <= high
    assert run(2.0, 0) > run(1.0, 0)
