"""Event-driven warehouse floor: per-slot consolidation decisions under queue dynamics.

The floor holds ``floor_max`` tote slots.  Each decision step presents one
slot (linear traversal) and the action either ignores it or assigns the tote
to a human or robotic station as a consolidation source or destination.
Stations work through their source queues at fixed hourly rates; emptied
source totes feed a rolling empty-totes-per-hour gauge, which doubles as the
throughput reward.  Overnight, stow and pick processes add and remove
inventory and the slot order is reshuffled.

Reward layout: ``r[0]`` is the post-step ETPH gauge and ``r[1:]`` are signed
threshold slacks scaled by ``1/H``, so episode value sums land in level units.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass
from enum import IntEnum
from pathlib import Path
from typing import IO, Callable

import numpy as np

from .regulator import ConstraintSpec
from .util import canonical_json, spawn_rng

__all__ = [
    "TRACE_SCHEMA",
    "EJECT_GCU",
    "N_CONSTRAINTS",
    "WAREHOUSE_SIGNS",
    "Occupancy",
    "Role",
    "Station",
    "Action",
    "EpisodeOver",
    "DayBoundaryError",
    "SimConfig",
    "ToteSlot",
    "FloorState",
    "StepEvents",
    "reset",
    "step",
    "simulate_step",
    "end_of_day",
    "raw_observation",
    "observation_bounds",
    "scale_observation",
    "encode_observation",
    "max_signal",
    "decode_action",
    "warehouse_constraints",
    "WarehouseSim",
    "TraceWriter",
    "read_trace",
    "trace_episode",
]

TRACE_SCHEMA = "totegame-trace v1"

# A destination tote ships out once its fill fraction reaches this level.
EJECT_GCU = 0.95

N_CONSTRAINTS = 4

# Orientation of the four floor thresholds: large-tote share and the two
# station loads are upper bounds, the source/destination ratio is a lower
# bound.
WAREHOUSE_SIGNS = np.array([1.0, -1.0, 1.0, 1.0])


class Occupancy(IntEnum):
    """Slot contents; the integer value is also the observation encoding."""

    EMPTY = 0
    LARGE = 1
    SMALL = 2


class Role(IntEnum):
    SOURCE = 0
    DESTINATION = 1


class Station(IntEnum):
    HUMAN = 0
    ROBOT = 1


class EpisodeOver(RuntimeError):
    """Raised when stepping past the horizon."""


class DayBoundaryError(RuntimeError):
    """Raised when the overnight transition is invoked away from a day boundary."""


@dataclass(frozen=True)
class Action:
    """One slot decision: skip it, or send its tote to a station in a role."""

    ignore: bool
    role: Role = Role.SOURCE
    station: Station = Station.HUMAN

    @property
    def index(self) -> int:
        return 4 * int(self.ignore) + 2 * int(self.role) + int(self.station)

    @staticmethod
    def from_index(index: int) -> "Action":
        if not 0 <= index < 8:
            raise ValueError(f"action index must be in 0..7, got {index}")
        return Action(bool(index // 4), Role((index % 4) // 2), Station(index % 2))


def decode_action(index: int, collapse_actions: bool) -> Action:
    """Map a flat action index to an Action.

    The full space has 8 indices; the four with the ignore bit set are
    behavioral aliases.  With ``collapse_actions`` the space shrinks to the 5
    distinct behaviors, index 4 being the single ignore.
    """
    if collapse_actions:
        if not 0 <= index < 5:
            raise ValueError(f"collapsed action index must be in 0..4, got {index}")
        if index == 4:
            return Action(True)
        return Action(False, Role(index // 2), Station(index % 2))
    return Action.from_index(index)


@dataclass(frozen=True)
class SimConfig:
    """Floor geometry, process rates, and episode clock.

    ``human_rate`` and ``robot_rate`` are totes handled per hour per station;
    ``stow_rate`` is the mean of the Poisson daily arrival count;
    ``pick_fraction`` is the share of scheduled picks executed each night.
    ``item_max`` parameterizes the uniform{1..item_max} item-count law for
    arriving totes and must not exceed ``tote_capacity``.
    """

    floor_max: int = 1000
    steps_per_day: int = 1440
    n_days: int = 10
    etph_window_hours: float = 1.0
    human_rate: float = 4.0
    robot_rate: float = 8.0
    stow_rate: float = 40.0
    pick_fraction: float = 0.5
    init_large_fraction: float = 0.5
    init_fill_fraction: float = 0.9
    item_max: int = 12
    tote_capacity: int = 12
    collapse_actions: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("floor_max", "steps_per_day", "n_days", "item_max", "tote_capacity"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive count")
        if not self.etph_window_hours > 0.0:
            raise ValueError("etph_window_hours must be positive")
        for name in ("human_rate", "robot_rate", "stow_rate"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("pick_fraction", "init_large_fraction", "init_fill_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.item_max > self.tote_capacity:
            raise ValueError("item_max cannot exceed tote_capacity")

    @property
    def horizon(self) -> int:
        return self.steps_per_day * self.n_days

    @property
    def dt_hours(self) -> float:
        """Simulated hours per decision step; a day is 24 hours."""
        return 24.0 / self.steps_per_day

    @property
    def window_steps(self) -> int:
        return max(1, round(self.etph_window_hours / self.dt_hours))

    @property
    def n_actions(self) -> int:
        return 5 if self.collapse_actions else 8


def max_signal(config: SimConfig) -> float:
    """Hard bound on any constraint signal.

    Totes enter the floor only at reset or via stow, and a day's stow is
    capped by the empty-slot count, so the total tote population never
    exceeds (n_days + 1) * floor_max.  Queue lengths and the source count in
    the ratio signal are all bounded by that population.
    """
    return float((config.n_days + 1) * config.floor_max)


@dataclass(frozen=True)
class ToteSlot:
    """Read-only view of one slot."""

    occupancy: Occupancy
    n_item: int
    n_pick: int
    gcu: float


@dataclass
class FloorState:
    """Mutable simulator state; ``step`` updates it in place and returns it."""

    config: SimConfig
    occupancy: np.ndarray
    n_item: np.ndarray
    n_pick: np.ndarray
    dest_station: np.ndarray
    cursor: int
    n_large: int
    src_queues: tuple[deque, deque]
    dest_counts: np.ndarray
    work_acc: np.ndarray
    emptied_window: np.ndarray
    window_pos: int
    window_sum: int
    etph: float
    t: int
    day_step: int
    seed: int
    rng: np.random.Generator

    def slot(self, index: int) -> ToteSlot:
        n = int(self.n_item[index])
        return ToteSlot(
            occupancy=Occupancy(int(self.occupancy[index])),
            n_item=n,
            n_pick=int(self.n_pick[index]),
            gcu=n / self.config.tote_capacity,
        )

    @property
    def queue_lengths(self) -> tuple[int, int, int, int]:
        """(L^H_S, L^H_D, L^R_S, L^R_D): source queues and registered destinations."""
        return (
            len(self.src_queues[0]),
            int(self.dest_counts[0]),
            len(self.src_queues[1]),
            int(self.dest_counts[1]),
        )

    @property
    def total_items(self) -> int:
        """Items on the floor plus items inside in-flight source totes."""
        floor = int(self.n_item.sum())
        return floor + sum(self.src_queues[0]) + sum(self.src_queues[1])


@dataclass
class StepEvents:
    """Side channel of what happened inside one transition, for audits.

    The trailing fields snapshot the levels the reward was computed from;
    at a day boundary the returned state has already absorbed the overnight
    stow, so the snapshot is what keeps traces reward-consistent.
    """

    emptied: int = 0
    bounced: int = 0
    transferred: int = 0
    ejected_totes: int = 0
    ejected_items: int = 0
    stowed_totes: int = 0
    stowed_items: int = 0
    picked_items: int = 0
    day_end: bool = False
    etph: float = 0.0
    n_large: int = 0
    queues: tuple[int, int, int, int] = (0, 0, 0, 0)


def reset(config: SimConfig, seed: int) -> FloorState:
    """Populate a fresh floor from the seeded generator.

    Each slot is occupied with probability ``init_fill_fraction``; occupied
    slots are Large with probability ``init_large_fraction`` and carry
    uniform{1..item_max} items with up to that many scheduled picks.  The
    returned generator state is carried forward for in-day randomness.
    """
    rng = spawn_rng(seed, 0xF1008)
    n = config.floor_max
    occupied = rng.random(n) < config.init_fill_fraction
    large = rng.random(n) < config.init_large_fraction
    occupancy = np.where(
        occupied,
        np.where(large, int(Occupancy.LARGE), int(Occupancy.SMALL)),
        int(Occupancy.EMPTY),
    ).astype(np.int8)
    n_item = np.zeros(n, dtype=np.int64)
    n_pick = np.zeros(n, dtype=np.int64)
    k = int(occupied.sum())
    if k:
        items = rng.integers(1, config.item_max + 1, size=k)
        n_item[occupied] = items
        n_pick[occupied] = rng.integers(0, items + 1)
    return FloorState(
        config=config,
        occupancy=occupancy,
        n_item=n_item,
        n_pick=n_pick,
        dest_station=np.full(n, -1, dtype=np.int8),
        cursor=0,
        n_large=int((occupancy == Occupancy.LARGE).sum()),
        src_queues=(deque(), deque()),
        dest_counts=np.zeros(2, dtype=np.int64),
        work_acc=np.zeros(2),
        emptied_window=np.zeros(config.window_steps, dtype=np.int64),
        window_pos=0,
        window_sum=0,
        etph=0.0,
        t=0,
        day_step=0,
        seed=int(seed),
        rng=rng,
    )


def _eject(state: FloorState, index: int, events: StepEvents) -> None:
    """Ship a filled destination tote downstream, freeing its slot."""
    events.ejected_totes += 1
    events.ejected_items += int(state.n_item[index])
    if state.occupancy[index] == Occupancy.LARGE:
        state.n_large -= 1
    state.dest_counts[state.dest_station[index]] -= 1
    state.dest_station[index] = -1
    state.occupancy[index] = Occupancy.EMPTY
    state.n_item[index] = 0
    state.n_pick[index] = 0


def _apply_action(state: FloorState, action: Action, events: StepEvents) -> None:
    k = state.cursor
    # Empty slots and totes already claimed as destinations are inert.
    if action.ignore or state.occupancy[k] == Occupancy.EMPTY or state.dest_station[k] >= 0:
        return
    if action.role == Role.SOURCE:
        if state.occupancy[k] == Occupancy.LARGE:
            state.n_large -= 1
        state.src_queues[int(action.station)].append(int(state.n_item[k]))
        state.occupancy[k] = Occupancy.EMPTY
        state.n_item[k] = 0
        state.n_pick[k] = 0
    else:
        state.dest_station[k] = int(action.station)
        state.dest_counts[int(action.station)] += 1
        # Committing a tote to consolidation cancels its scheduled picks.
        state.n_pick[k] = 0
        if state.n_item[k] / state.config.tote_capacity >= EJECT_GCU:
            _eject(state, k, events)


def _serve_station(state: FloorState, station: int, events: StepEvents) -> None:
    """Advance one station by one step of fixed-rate service.

    Each whole unit of accumulated work handles one source tote: the robot
    first rolls success with probability LTE = 1/n_item and re-queues
    failures to the human station; a handled tote's items transfer greedily
    into the station's registered destination totes, destinations shipping
    out as they fill.  A tote that cannot be fully emptied (destination space
    exhausted) stays at the queue head.  Idle capacity beyond one tote's
    worth of work is not banked.
    """
    cfg = state.config
    rate = cfg.human_rate if station == Station.HUMAN else cfg.robot_rate
    acc = float(state.work_acc[station]) + rate * cfg.dt_hours
    queue = state.src_queues[station]
    cap = cfg.tote_capacity
    while acc >= 1.0 and queue:
        dests = np.flatnonzero(state.dest_station == station)
        if dests.size == 0 or cap * dests.size - int(state.n_item[dests].sum()) <= 0:
            break
        if station == Station.ROBOT and state.rng.random() >= 1.0 / queue[0]:
            state.src_queues[Station.HUMAN].append(queue.popleft())
            events.bounced += 1
            acc -= 1.0
            continue
        remaining = queue[0]
        for d in dests:
            space = cap - int(state.n_item[d])
            if space <= 0:
                continue
            take = min(remaining, space)
            state.n_item[d] += take
            remaining -= take
            events.transferred += take
            if state.n_item[d] / cap >= EJECT_GCU:
                _eject(state, int(d), events)
            if remaining == 0:
                break
        acc -= 1.0
        if remaining == 0:
            queue.popleft()
            events.emptied += 1
        else:
            queue[0] = remaining
            break
    state.work_acc[station] = min(acc, 1.0)


def _update_etph(state: FloorState, emptied: int) -> None:
    state.window_sum += emptied - int(state.emptied_window[state.window_pos])
    state.emptied_window[state.window_pos] = emptied
    state.window_pos = (state.window_pos + 1) % state.config.window_steps
    state.etph = state.window_sum / state.config.etph_window_hours


def _reward(state: FloorState, spec: ConstraintSpec) -> np.ndarray:
    cfg = state.config
    lhs, lhd, lrs, lrd = state.queue_lengths
    signals = np.array(
        [
            state.n_large / cfg.floor_max,
            (lhs + lrs) / (1.0 + lhd + lrd),
            float(lhs + lhd),
            float(lrs + lrd),
        ]
    )
    reward = np.empty(N_CONSTRAINTS + 1)
    reward[0] = state.etph
    reward[1:] = spec.sign * (spec.alpha - signals) / cfg.horizon
    return reward


def _end_of_day(state: FloorState, events: StepEvents) -> None:
    cfg = state.config
    day = state.t // cfg.steps_per_day
    # Overnight randomness comes from a fresh per-day stream so that the
    # stow sequence is a function of (seed, day) alone.
    rng = spawn_rng(state.seed, 0xDA7, day)

    arrivals = int(rng.poisson(cfg.stow_rate))
    empty = np.flatnonzero(state.occupancy == Occupancy.EMPTY)
    arrivals = min(arrivals, empty.size)
    if arrivals:
        chosen = empty[:arrivals]
        large = rng.random(arrivals) < cfg.init_large_fraction
        items = rng.integers(1, cfg.item_max + 1, size=arrivals)
        picks = rng.integers(0, items + 1)
        state.occupancy[chosen] = np.where(large, int(Occupancy.LARGE), int(Occupancy.SMALL))
        state.n_item[chosen] = items
        state.n_pick[chosen] = picks
        state.n_large += int(large.sum())
        events.stowed_totes = arrivals
        events.stowed_items = int(items.sum())

    # Claimed destination totes carry n_pick = 0, so a single vectorized
    # draw over the whole floor never touches them.
    executed = rng.binomial(state.n_pick, cfg.pick_fraction)
    state.n_item -= executed
    state.n_pick -= executed
    events.picked_items = int(executed.sum())
    emptied_by_picks = (state.n_item == 0) & (state.occupancy != Occupancy.EMPTY)
    if emptied_by_picks.any():
        state.n_large -= int((state.occupancy[emptied_by_picks] == Occupancy.LARGE).sum())
        state.occupancy[emptied_by_picks] = Occupancy.EMPTY

    perm = rng.permutation(cfg.floor_max)
    for arr in (state.occupancy, state.n_item, state.n_pick, state.dest_station):
        arr[:] = arr[perm]
    state.day_step = 0
    events.day_end = True


def end_of_day(state: FloorState) -> FloorState:
    """Run the overnight stow/pick/shuffle; only legal at a day boundary."""
    if state.day_step != state.config.steps_per_day:
        raise DayBoundaryError(
            f"end_of_day requires day_step == {state.config.steps_per_day}, "
            f"got {state.day_step}"
        )
    _end_of_day(state, StepEvents())
    return state


def simulate_step(
    state: FloorState, action: Action, spec: ConstraintSpec
) -> tuple[FloorState, np.ndarray, StepEvents]:
    """One decision step, exposing the internal event record.

    Order: apply the slot action, advance the cursor, run station service,
    refresh the ETPH gauge, advance the clock, compute the reward from the
    resulting levels, then run the overnight transition if a day just ended
    (the reward deliberately predates the overnight noise).
    """
    cfg = state.config
    if state.t >= cfg.horizon:
        raise EpisodeOver(f"episode horizon {cfg.horizon} reached")
    if not 0 <= state.cursor < cfg.floor_max:
        raise ValueError(f"cursor {state.cursor} outside the floor")
    if spec.alpha.size != N_CONSTRAINTS:
        raise ValueError(f"expected {N_CONSTRAINTS} thresholds, got {spec.alpha.size}")
    events = StepEvents()
    _apply_action(state, action, events)
    state.cursor = (state.cursor + 1) % cfg.floor_max
    _serve_station(state, int(Station.HUMAN), events)
    _serve_station(state, int(Station.ROBOT), events)
    _update_etph(state, events.emptied)
    state.t += 1
    state.day_step += 1
    reward = _reward(state, spec)
    events.etph = state.etph
    events.n_large = state.n_large
    events.queues = state.queue_lengths
    if state.day_step == cfg.steps_per_day:
        _end_of_day(state, events)
    return state, reward, events


def step(state: FloorState, action: Action, spec: ConstraintSpec) -> tuple[FloorState, np.ndarray]:
    new_state, reward, _ = simulate_step(state, action, spec)
    return new_state, reward


def raw_observation(state: FloorState) -> np.ndarray:
    """Unscaled 12-vector: floor summary, queue lengths, cursor slot, clock.

    Components: (N_large, ETPH, L^H_S, L^H_D, L^R_S, L^R_D, O_k, LTE,
    n_item, n_pick, GCU, t).  LTE is the single-grasp success proxy
    1/n_item, taken as 1 for an empty slot.
    """
    k = state.cursor
    n = int(state.n_item[k])
    lhs, lhd, lrs, lrd = state.queue_lengths
    return np.array(
        [
            float(state.n_large),
            state.etph,
            float(lhs),
            float(lhd),
            float(lrs),
            float(lrd),
            float(state.occupancy[k]),
            1.0 if n == 0 else 1.0 / n,
            float(n),
            float(state.n_pick[k]),
            n / state.config.tote_capacity,
            float(state.t),
        ]
    )


def observation_bounds(config: SimConfig) -> np.ndarray:
    """Per-component scale for min-max normalization (lower bounds are 0).

    The ETPH bound adds one banked work unit per station on top of the
    nominal combined rate; queue lengths are scaled by the floor size and
    clipped, since pathological stow regimes can exceed it.
    """
    etph_bound = config.human_rate + config.robot_rate + 2.0 / config.etph_window_hours
    queue_bound = float(config.floor_max)
    return np.array(
        [
            float(config.floor_max),
            etph_bound,
            queue_bound,
            queue_bound,
            queue_bound,
            queue_bound,
            2.0,
            1.0,
            float(config.tote_capacity),
            float(config.tote_capacity),
            1.0,
            float(config.horizon),
        ]
    )


def scale_observation(obs: np.ndarray, config: SimConfig) -> np.ndarray:
    scaled = np.asarray(obs, dtype=np.float64) / observation_bounds(config)
    return np.clip(scaled, 0.0, 1.0)


def encode_observation(state: FloorState) -> np.ndarray:
    """Scaled observation in [0, 1]^12 for the function approximator."""
    return scale_observation(raw_observation(state), state.config)


def warehouse_constraints(
    alpha: tuple[float, float, float, float] = (0.6, 1.0, 5.0, 25.0),
    cap: float = 20000.0,
) -> ConstraintSpec:
    """Threshold spec for the four floor constraints.

    ``alpha`` is (large-tote share upper bound, source/destination ratio
    lower bound, human station load upper bound, robot station load upper
    bound).
    """
    if len(alpha) != N_CONSTRAINTS:
        raise ValueError(f"alpha must have {N_CONSTRAINTS} entries")
    return ConstraintSpec(
        alpha=np.asarray(alpha, dtype=np.float64),
        sign=WAREHOUSE_SIGNS.copy(),
        cap=cap,
        labels=("large_share", "src_dest_ratio", "human_load", "robot_load"),
    )


class WarehouseSim:
    """Episodic-MDP adapter binding a floor config and a threshold spec.

    Actions arrive as flat indices (8 canonical, or 5 when the config
    collapses the ignore aliases); observations go out raw and are scaled
    by ``features_from_obs`` for function approximation.
    """

    def __init__(self, config: SimConfig, spec: ConstraintSpec):
        if spec.alpha.size != N_CONSTRAINTS:
            raise ValueError(f"expected {N_CONSTRAINTS} thresholds, got {spec.alpha.size}")
        self.config = config
        self.spec = spec
        self.horizon = config.horizon
        self.n_actions = config.n_actions
        self.reward_dim = N_CONSTRAINTS + 1

    def init_state(self, seed: int) -> FloorState:
        return reset(self.config, seed)

    def step(self, state: FloorState, action: int) -> tuple[FloorState, np.ndarray]:
        act = decode_action(int(action), self.config.collapse_actions)
        return step(state, act, self.spec)

    def observe(self, state: FloorState) -> np.ndarray:
        return raw_observation(state)

    def features_from_obs(self, obs: np.ndarray, step: int) -> np.ndarray:
        return scale_observation(obs, self.config)


class TraceWriter:
    """Newline-delimited JSON trace with a versioned header record."""

    def __init__(self, stream: IO[str], config: SimConfig, seed: int):
        self._stream = stream
        header = {"schema": TRACE_SCHEMA, "seed": int(seed), "config": asdict(config)}
        stream.write(canonical_json(header) + "\n")

    def record(
        self,
        state: FloorState,
        action_index: int,
        reward: np.ndarray,
        events: StepEvents,
    ) -> None:
        """Append one post-step record; call with the state returned by step.

        Level fields come from the events snapshot so that every row is
        consistent with its own reward vector even on day-boundary steps.
        """
        row = {
            "t": state.t,
            "day": (state.t - 1) // state.config.steps_per_day,
            "action_index": int(action_index),
            "reward_vector": [float(x) for x in reward],
            "etph": events.etph,
            "n_large": events.n_large,
            "queues": list(events.queues),
            "emptied": events.emptied,
        }
        self._stream.write(canonical_json(row) + "\n")


def read_trace(path: str | Path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"empty trace file: {path}")
    header = json.loads(lines[0])
    if header.get("schema") != TRACE_SCHEMA:
        raise ValueError(f"unrecognized trace schema: {header.get('schema')!r}")
    return header, [json.loads(line) for line in lines[1:]]


def trace_episode(
    stream: IO[str],
    config: SimConfig,
    spec: ConstraintSpec,
    policy: Callable[[np.ndarray, int, np.random.Generator], int],
    seed: int,
) -> np.ndarray:
    """Run one traced episode under ``policy``; returns the episode value vector."""
    sim = WarehouseSim(config, spec)
    writer = TraceWriter(stream, config, seed)
    policy_rng = spawn_rng(seed, 0xAC7)
    state = sim.init_state(seed)
    totals = np.zeros(sim.reward_dim)
    for t in range(sim.horizon):
        obs = raw_observation(state)
        action = int(policy(obs, t, policy_rng))
        act = decode_action(action, config.collapse_actions)
        state, reward, events = simulate_step(state, act, spec)
        writer.record(state, action, reward, events)
        totals += reward
    return totals
