"""Episodic MDP interfaces, tabular instances, rollouts and occupancy calculus.

Everything downstream (learner, conditional-gradient solver, extraction
testbed) works against the small protocol here: a finite-horizon environment
with vector rewards, policies that map observations to actions, and exact
occupancy / value computations for the tabular case.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence, runtime_checkable

import numpy as np

from .util import spawn_rng

ROW_SUM_TOL = 1e-12
MIX_WEIGHT_TOL = 1e-12
OCCUPANCY_TOL = 1e-9


@runtime_checkable
class EpisodicMDP(Protocol):
    """Finite-horizon environment with an (m+1)-dimensional reward signal."""

    horizon: int
    n_actions: int
    reward_dim: int

    def init_state(self, seed: int) -> Any: ...

    def step(self, state: Any, action: int) -> tuple[Any, np.ndarray]: ...

    def observe(self, state: Any) -> Any: ...

    def features_from_obs(self, obs: Any, step: int) -> np.ndarray: ...


class Policy(Protocol):
    def act(self, obs: Any, step: int, rng: np.random.Generator) -> int: ...


@dataclass(frozen=True)
class TabularPolicy:
    """Per-step stochastic policy over a tabular MDP: table[h, s] is a distribution."""

    table: np.ndarray  # (H, S, A)

    def __post_init__(self) -> None:
        table = np.asarray(self.table, dtype=np.float64)
        if table.ndim == 2:  # stationary (S, A) shorthand is not allowed silently
            raise ValueError("policy table must be (H, S, A); broadcast explicitly if stationary")
        if table.ndim != 3:
            raise ValueError("policy table must have shape (H, S, A)")
        if np.any(table < -ROW_SUM_TOL):
            raise ValueError("negative action probability")
        sums = table.sum(axis=2)
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            raise ValueError("policy rows must sum to 1")
        object.__setattr__(self, "table", table)

    @staticmethod
    def deterministic(actions: np.ndarray, n_actions: int) -> "TabularPolicy":
        """Build from an (H, S) array of action indices."""
        actions = np.asarray(actions, dtype=np.int64)
        horizon, n_states = actions.shape
        table = np.zeros((horizon, n_states, n_actions))
        for h in range(horizon):
            table[h, np.arange(n_states), actions[h]] = 1.0
        return TabularPolicy(table)

    @staticmethod
    def uniform(horizon: int, n_states: int, n_actions: int) -> "TabularPolicy":
        return TabularPolicy(np.full((horizon, n_states, n_actions), 1.0 / n_actions))

    def act(self, obs: int, step: int, rng: np.random.Generator) -> int:
        probs = self.table[step, int(obs)]
        return int(rng.choice(probs.size, p=probs))


@dataclass(frozen=True)
class PolicyMixture:
    """Finite distribution over policies; a member is drawn once per episode."""

    members: tuple
    weights: np.ndarray

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "weights", weights)
        if len(self.members) != weights.size or weights.size == 0:
            raise ValueError("need one weight per member policy")
        if np.any(weights < 0.0):
            raise ValueError("mixture weights must be nonnegative")
        if abs(float(weights.sum()) - 1.0) > MIX_WEIGHT_TOL:
            raise ValueError(f"mixture weights sum to {weights.sum()}, expected 1")

    def sample_member(self, rng: np.random.Generator):
        idx = int(rng.choice(self.weights.size, p=self.weights / self.weights.sum()))
        return self.members[idx]

    def act(self, obs: Any, step: int, rng: np.random.Generator) -> int:
        # acting through the mixture directly resamples per call; rollout() draws
        # the member once per episode instead, which is the intended semantics
        return self.sample_member(rng).act(obs, step, rng)


@dataclass
class TabState:
    state: int
    step: int
    rng: np.random.Generator


class TabularMDP:
    """Finite MDP with stationary transitions and (m+1) stationary reward tables."""

    def __init__(
        self,
        transitions: np.ndarray,
        rewards: np.ndarray,
        init_dist: np.ndarray,
        horizon: int,
    ) -> None:
        transitions = np.asarray(transitions, dtype=np.float64)
        rewards = np.asarray(rewards, dtype=np.float64)
        init_dist = np.asarray(init_dist, dtype=np.float64)
        if transitions.ndim != 3 or transitions.shape[0] != transitions.shape[2]:
            raise ValueError("transitions must have shape (S, A, S)")
        n_states, n_actions, _ = transitions.shape
        if np.any(transitions < 0.0):
            raise ValueError("negative transition probability")
        row_err = np.max(np.abs(transitions.sum(axis=2) - 1.0))
        if row_err > ROW_SUM_TOL:
            raise ValueError(f"transition rows must sum to 1 (max deviation {row_err:.3e})")
        if rewards.ndim != 3 or rewards.shape[1:] != (n_states, n_actions):
            raise ValueError("rewards must have shape (m+1, S, A)")
        if init_dist.shape != (n_states,) or np.any(init_dist < 0.0):
            raise ValueError("init_dist must be a distribution over states")
        if abs(init_dist.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError("init_dist must sum to 1")
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.transitions = transitions
        self.rewards = rewards
        self.init_dist = init_dist
        self.horizon = int(horizon)
        self.n_states = n_states
        self.n_actions = n_actions
        self.reward_dim = rewards.shape[0]

    # --- episodic interface -------------------------------------------------
    def init_state(self, seed: int) -> TabState:
        rng = spawn_rng(seed, 0xE0)
        start = int(rng.choice(self.n_states, p=self.init_dist))
        return TabState(state=start, step=0, rng=rng)

    def step(self, state: TabState, action: int) -> tuple[TabState, np.ndarray]:
        if state.step >= self.horizon:
            raise ValueError("episode is over")
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} out of range")
        reward = self.rewards[:, state.state, action].copy()
        nxt = int(state.rng.choice(self.n_states, p=self.transitions[state.state, action]))
        return TabState(state=nxt, step=state.step + 1, rng=state.rng), reward

    def observe(self, state: TabState) -> int:
        return state.state

    def features_from_obs(self, obs: int, step: int) -> np.ndarray:
        vec = np.zeros(self.n_states + 1)
        vec[int(obs)] = 1.0
        vec[-1] = step / self.horizon
        return vec

    @property
    def feature_dim(self) -> int:
        return self.n_states + 1


@dataclass(frozen=True)
class OccupancyMeasure:
    """Per-step state-action visitation probabilities q[h, s, a]."""

    q: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 3:
            raise ValueError("occupancy must have shape (H, S, A)")
        if np.any(q < -OCCUPANCY_TOL):
            raise ValueError("negative visitation mass")
        per_step = q.sum(axis=(1, 2))
        if np.max(np.abs(per_step - 1.0)) > OCCUPANCY_TOL:
            raise ValueError("each step's visitation mass must sum to 1")
        object.__setattr__(self, "q", q)

    @property
    def horizon(self) -> int:
        return self.q.shape[0]

    @property
    def totals(self) -> np.ndarray:
        """Summed state-action mass d(s, a); sums to the horizon."""
        return self.q.sum(axis=0)


@dataclass(frozen=True)
class ValueVector:
    """Estimated episodic values per reward channel with standard errors."""

    values: np.ndarray
    stderr: np.ndarray
    n_episodes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "stderr", np.asarray(self.stderr, dtype=np.float64))
        if self.values.shape != self.stderr.shape:
            raise ValueError("values and stderr must align")


@dataclass(frozen=True)
class Trajectory:
    observations: tuple
    actions: np.ndarray
    rewards: np.ndarray  # (H, m+1)

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=0)


# --- rollouts ---------------------------------------------------------------

def rollout(mdp: EpisodicMDP, policy: Policy, seed: int) -> Trajectory:
    """One seeded episode; mixtures commit to a single member for the episode."""
    policy_rng = spawn_rng(seed, 0xA1)
    if isinstance(policy, PolicyMixture):
        policy = policy.sample_member(spawn_rng(seed, 0xA2))
    state = mdp.init_state(seed)
    obs_list, actions, rewards = [], [], []
    for h in range(mdp.horizon):
        obs = mdp.observe(state)
        action = int(policy.act(obs, h, policy_rng))
        state, reward = mdp.step(state, action)
        obs_list.append(obs)
        actions.append(action)
        rewards.append(reward)
    return Trajectory(tuple(obs_list), np.array(actions, dtype=np.int64), np.array(rewards))


def episode_returns(mdp: EpisodicMDP, policy: Policy, n_episodes: int, seed: int) -> np.ndarray:
    """(n_episodes, m+1) matrix of per-episode summed rewards."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    fast = _tabular_episode_returns(mdp, policy, n_episodes, seed)
    if fast is not None:
        return fast
    out = np.empty((n_episodes, mdp.reward_dim))
    for ep in range(n_episodes):
        out[ep] = rollout(mdp, policy, _episode_seed(seed, ep)).returns
    return out


def estimate_values(mdp: EpisodicMDP, policy: Policy, n_episodes: int, seed: int) -> ValueVector:
    """Monte Carlo value estimates: sample means of episodic reward sums."""
    returns = episode_returns(mdp, policy, n_episodes, seed)
    values = returns.mean(axis=0)
    if n_episodes > 1:
        stderr = returns.std(axis=0, ddof=1) / np.sqrt(n_episodes)
    else:
        stderr = np.zeros_like(values)
    return ValueVector(values=values, stderr=stderr, n_episodes=n_episodes)


def _episode_seed(seed: int, episode: int) -> int:
    # fold (seed, episode) into a single int so child streams stay independent
    return int(np.random.SeedSequence([int(seed), int(episode)]).generate_state(1)[0])


def _tabular_episode_returns(mdp, policy, n_episodes: int, seed: int):
    """Vectorized sampler for tabular policies and mixtures thereof; None if not applicable."""
    if not isinstance(mdp, TabularMDP):
        return None
    if isinstance(policy, PolicyMixture):
        if not all(isinstance(p, TabularPolicy) for p in policy.members):
            return None
        rng = spawn_rng(seed, 0xB0)
        counts = rng.multinomial(n_episodes, policy.weights / policy.weights.sum())
        blocks = []
        for idx, count in enumerate(counts):
            if count == 0:
                continue
            blocks.append(_batch_rollout_returns(mdp, policy.members[idx], int(count), spawn_rng(seed, 0xB1, idx)))
        out = np.concatenate(blocks, axis=0)
        rng.shuffle(out, axis=0)
        return out
    if isinstance(policy, TabularPolicy):
        return _batch_rollout_returns(mdp, policy, n_episodes, spawn_rng(seed, 0xB1, 0))
    return None


def _batch_rollout_returns(mdp: TabularMDP, policy: TabularPolicy, n: int, rng: np.random.Generator) -> np.ndarray:
    states = _sample_rows(mdp.init_dist[None, :].repeat(n, axis=0), rng)
    totals = np.zeros((n, mdp.reward_dim))
    for h in range(mdp.horizon):
        actions = _sample_rows(policy.table[h, states], rng)
        totals += mdp.rewards[:, states, actions].T
        states = _sample_rows(mdp.transitions[states, actions], rng)
    return totals


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sample one index per row of a (n, k) table of row distributions."""
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(probs.shape[0])
    return (u[:, None] > cdf).sum(axis=1).astype(np.int64)


# --- exact tabular calculus -------------------------------------------------

def occupancy_of_policy(mdp: TabularMDP, policy: TabularPolicy) -> OccupancyMeasure:
    """Forward dynamic program for the per-step visitation measure."""
    if policy.table.shape != (mdp.horizon, mdp.n_states, mdp.n_actions):
        raise ValueError("policy table shape does not match the MDP")
    q = np.zeros((mdp.horizon, mdp.n_states, mdp.n_actions))
    state_dist = mdp.init_dist.copy()
    flat_P = mdp.transitions.reshape(mdp.n_states * mdp.n_actions, mdp.n_states)
    for h in range(mdp.horizon):
        q[h] = state_dist[:, None] * policy.table[h]
        state_dist = q[h].reshape(-1) @ flat_P
    return OccupancyMeasure(q=q)


def value_from_occupancy(occupancy: OccupancyMeasure, rewards: np.ndarray) -> np.ndarray:
    """Inner products <r_i, d> for a stack of reward tables (k, S, A)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    single = rewards.ndim == 2
    if single:
        rewards = rewards[None]
    totals = occupancy.totals
    if rewards.shape[1:] != totals.shape:
        raise ValueError("reward tables do not match the occupancy shape")
    vals = rewards.reshape(rewards.shape[0], -1) @ totals.reshape(-1)
    return float(vals[0]) if single else vals


def flow_residual(mdp: TabularMDP, occupancy: OccupancyMeasure) -> float:
    """Worst violation of the occupancy flow constraints for this MDP.

    Checks the step-0 marginal against the initial distribution and each
    consecutive pair ``sum_a q[h+1](s', a) = sum_{s,a} q[h](s, a) P(s'|s, a)``.
    """
    q = occupancy.q
    flat_P = mdp.transitions.reshape(mdp.n_states * mdp.n_actions, mdp.n_states)
    worst = float(np.max(np.abs(q[0].sum(axis=1) - mdp.init_dist)))
    for h in range(occupancy.horizon - 1):
        pushed = q[h].reshape(-1) @ flat_P
        worst = max(worst, float(np.max(np.abs(q[h + 1].sum(axis=1) - pushed))))
    return worst


def backward_induction(mdp: TabularMDP, reward: np.ndarray) -> tuple[float, np.ndarray]:
    """Optimal value and greedy deterministic policy for a scalar reward table.

    ``reward`` is (S, A) applied at every step, or (H, S, A).  Ties pick the
    lowest action index, so the all-zero reward yields the lexicographically
    first policy.
    """
    reward = np.asarray(reward, dtype=np.float64)
    if reward.ndim == 2:
        reward = np.broadcast_to(reward, (mdp.horizon, *reward.shape))
    if reward.shape != (mdp.horizon, mdp.n_states, mdp.n_actions):
        raise ValueError("reward must be (S, A) or (H, S, A)")
    greedy = np.zeros((mdp.horizon, mdp.n_states), dtype=np.int64)
    future = np.zeros(mdp.n_states)
    for h in range(mdp.horizon - 1, -1, -1):
        q_vals = reward[h] + mdp.transitions @ future
        greedy[h] = np.argmax(q_vals, axis=1)
        future = q_vals[np.arange(mdp.n_states), greedy[h]]
    return float(mdp.init_dist @ future), greedy


# --- plain-text serialization ----------------------------------------------

FORMAT_TAG = "totegame-mdp v1"


def save_tabular_mdp(mdp: TabularMDP, path: str | Path) -> None:
    """Write the documented plain-text matrix format (see load_tabular_mdp)."""
    lines = [
        FORMAT_TAG,
        f"states {mdp.n_states}",
        f"actions {mdp.n_actions}",
        f"horizon {mdp.horizon}",
        f"rewards {mdp.reward_dim}",
        "init",
        _row(mdp.init_dist),
        "transitions",
    ]
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            lines.append(_row(mdp.transitions[s, a]))
    for i in range(mdp.reward_dim):
        lines.append(f"reward {i}")
        for s in range(mdp.n_states):
            lines.append(_row(mdp.rewards[i, s]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_tabular_mdp(path: str | Path) -> TabularMDP:
    """Parse the plain-text format:

    line 1: ``totegame-mdp v1``; then ``states S`` / ``actions A`` /
    ``horizon H`` / ``rewards K``; an ``init`` block with one row of S floats;
    a ``transitions`` block with S*A rows ((s, a) lexicographic, each a
    distribution over next states); K ``reward i`` blocks of S rows by A
    columns.  ``#`` comments and blank lines are ignored.
    """
    raw = [ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in raw if ln]
    if not lines or lines[0] != FORMAT_TAG:
        raise ValueError(f"not a {FORMAT_TAG} file: {path}")
    header: dict[str, int] = {}
    pos = 1
    for _ in range(4):
        key, value = lines[pos].split()
        header[key] = int(value)
        pos += 1
    n_states, n_actions = header["states"], header["actions"]
    horizon, n_rewards = header["horizon"], header["rewards"]
    if lines[pos] != "init":
        raise ValueError("expected init block")
    init_dist = _parse_row(lines[pos + 1], n_states)
    pos += 2
    if lines[pos] != "transitions":
        raise ValueError("expected transitions block")
    pos += 1
    transitions = np.empty((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            transitions[s, a] = _parse_row(lines[pos], n_states)
            pos += 1
    rewards = np.empty((n_rewards, n_states, n_actions))
    for i in range(n_rewards):
        if lines[pos] != f"reward {i}":
            raise ValueError(f"expected 'reward {i}' block, got {lines[pos]!r}")
        pos += 1
        for s in range(n_states):
            rewards[i, s] = _parse_row(lines[pos], n_actions)
            pos += 1
    return TabularMDP(transitions, rewards, init_dist, horizon)


def _row(values: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in values)


def _parse_row(line: str, width: int) -> np.ndarray:
    parts = [float(tok) for tok in line.split()]
    if len(parts) != width:
        raise ValueError(f"expected {width} floats, got {len(parts)}")
    return np.array(parts)
