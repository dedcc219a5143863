"""Episodic Q-learning on scalarized rewards: the learner side of the game.

Given fixed multipliers, the learner trains a feedforward Q-network with a
replay buffer, a target copy and an epsilon-greedy behaviour policy, and hands
back the greedy policy of the final parameter snapshot.  The replay buffer
stores full reward vectors rather than scalarized values, so a warm-started
learner can reuse old transitions after the multipliers move.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .mdp_core import EpisodicMDP, TabularMDP, TabularPolicy, backward_induction, occupancy_of_policy, value_from_occupancy
from .util import config_hash, spawn_rng, write_csv

__all__ = [
    "ScalarizedSpec",
    "LearnerConfig",
    "QFunction",
    "GreedyQPolicy",
    "ReplayBuffer",
    "BestResponseLearner",
    "BestResponseResult",
    "TrainingDiverged",
    "scalarize",
    "scalarized_table",
    "train_best_response",
    "best_response_gap",
    "tabularize_policy",
    "write_training_curve",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_TAG = "totegame-qnet v1"


@dataclass(frozen=True)
class ScalarizedSpec:
    """Multipliers, thresholds and constraint orientations for one round."""

    lam: np.ndarray
    alpha: np.ndarray
    sign: np.ndarray
    horizon: int

    def __post_init__(self) -> None:
        lam = np.asarray(self.lam, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        sign = np.asarray(self.sign, dtype=np.float64)
        if lam.shape != alpha.shape or lam.shape != sign.shape or lam.ndim != 1:
            raise ValueError("lam, alpha and sign must be equal-length vectors")
        if np.any(lam < 0.0):
            raise ValueError("multipliers must be nonnegative")
        if not np.all(np.isin(sign, (-1.0, 1.0))):
            raise ValueError("sign entries must be +1 or -1")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sign", sign)

    @property
    def m(self) -> int:
        return self.lam.size


def scalarize(reward: np.ndarray, spec: ScalarizedSpec):
    """``r_0 + sum_i lam_i (alpha_i / H - sign_i * r_i)`` along the last axis.

    Accepts a single (m+1)-vector or a batch (..., m+1); returns a float for
    the former and an array for the latter.
    """
    reward = np.asarray(reward, dtype=np.float64)
    if reward.shape[-1] != spec.m + 1:
        raise ValueError(f"reward has {reward.shape[-1]} components, spec wants {spec.m + 1}")
    out = reward[..., 0] + (reward[..., 1:] * (-spec.lam * spec.sign) + spec.lam * (spec.alpha / spec.horizon)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def scalarized_table(rewards: np.ndarray, spec: ScalarizedSpec) -> np.ndarray:
    """Apply the scalarization across an (m+1, S, A) stack of reward tables."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape[0] != spec.m + 1:
        raise ValueError(f"reward stack has {rewards.shape[0]} tables, spec wants {spec.m + 1}")
    offset = float(np.sum(spec.lam * spec.alpha) / spec.horizon)
    weighted = np.tensordot(spec.lam * spec.sign, rewards[1:], axes=(0, 0))
    return rewards[0] - weighted + offset


@dataclass(frozen=True)
class LearnerConfig:
    episodes_per_round: int = 30
    replay_capacity: int = 20_000
    batch_size: int = 64
    target_sync: int = 250  # gradient updates between target refreshes
    learning_rate: float = 1e-3
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay: float = 0.97  # per-episode multiplicative decay toward eps_end
    hidden_sizes: tuple[int, ...] = (64, 64)
    seed: int = 0
    retrain: bool = False  # reinitialize parameters and buffer every round

    def __post_init__(self) -> None:
        if min(self.episodes_per_round, self.replay_capacity, self.batch_size, self.target_sync) < 1:
            raise ValueError("episode, capacity, batch and sync settings must be positive")
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError("exploration rates must lie in [0, 1]")
        if not 0.0 < self.eps_decay <= 1.0:
            raise ValueError("eps_decay must lie in (0, 1]")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("need at least one hidden layer of positive width")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))


class TrainingDiverged(RuntimeError):
    """Raised when a gradient update produces non-finite values."""

    def __init__(self, episode: int) -> None:
        super().__init__(f"non-finite loss or parameters at training episode {episode}")
        self.episode = episode


class QFunction:
    """Fully connected relu network with a lazily synced target copy."""

    def __init__(self, input_dim: int, hidden_sizes: Sequence[int], n_actions: int, learning_rate: float, rng: np.random.Generator) -> None:
        sizes = [int(input_dim), *[int(h) for h in hidden_sizes], int(n_actions)]
        self.sizes = sizes
        self.learning_rate = float(learning_rate)
        self.weights = [rng.normal(0.0, np.sqrt(2.0 / sizes[i]), size=(sizes[i], sizes[i + 1])) for i in range(len(sizes) - 1)]
        self.biases = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]
        self.target_weights = [w.copy() for w in self.weights]
        self.target_biases = [b.copy() for b in self.biases]
        self.adam_m = [np.zeros_like(p) for p in self.weights + self.biases]
        self.adam_v = [np.zeros_like(p) for p in self.weights + self.biases]
        self.adam_t = 0

    @property
    def n_actions(self) -> int:
        return self.sizes[-1]

    def _forward(self, X: np.ndarray, weights, biases) -> list[np.ndarray]:
        activations = [np.asarray(X, dtype=np.float64)]
        for i, (W, b) in enumerate(zip(weights, biases)):
            z = activations[-1] @ W + b
            activations.append(z if i == len(weights) - 1 else np.maximum(z, 0.0))
        return activations

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self._forward(np.atleast_2d(X), self.weights, self.biases)[-1]

    def predict_target(self, X: np.ndarray) -> np.ndarray:
        return self._forward(np.atleast_2d(X), self.target_weights, self.target_biases)[-1]

    def greedy(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict(X), axis=1)

    def loss_and_grads(self, X: np.ndarray, actions: np.ndarray, targets: np.ndarray):
        """Mean squared Bellman residual and its parameter gradients."""
        acts = self._forward(X, self.weights, self.biases)
        q = acts[-1]
        rows = np.arange(len(actions))
        residual = q[rows, actions] - targets
        loss = float(np.mean(residual**2))
        dz = np.zeros_like(q)
        dz[rows, actions] = 2.0 * residual / len(actions)
        grads_w, grads_b = [], []
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w.append(acts[i].T @ dz)
            grads_b.append(dz.sum(axis=0))
            if i > 0:
                dz = (dz @ self.weights[i].T) * (acts[i] > 0.0)
        return loss, grads_w[::-1], grads_b[::-1]

    def gradient_step(self, X: np.ndarray, actions: np.ndarray, targets: np.ndarray) -> float:
        # overflow shows up as the explicit finiteness check below, not a warning
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads_w, grads_b = self.loss_and_grads(X, actions, targets)
            self.adam_t += 1
            params = self.weights + self.biases
            grads = grads_w + grads_b
            b1, b2, eps = 0.9, 0.999, 1e-8
            for p, g, m, v in zip(params, grads, self.adam_m, self.adam_v):
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g**2
                mhat = m / (1.0 - b1**self.adam_t)
                vhat = v / (1.0 - b2**self.adam_t)
                p -= self.learning_rate * mhat / (np.sqrt(vhat) + eps)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in params):
            raise FloatingPointError("non-finite update")
        return loss

    def sync_target(self) -> None:
        self.target_weights = [w.copy() for w in self.weights]
        self.target_biases = [b.copy() for b in self.biases]

    def snapshot(self) -> "QFunction":
        """Frozen deep copy; returned policies must not track later training."""
        clone = QFunction.__new__(QFunction)
        clone.sizes = list(self.sizes)
        clone.learning_rate = self.learning_rate
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone.target_weights = [w.copy() for w in self.target_weights]
        clone.target_biases = [b.copy() for b in self.target_biases]
        clone.adam_m = [m.copy() for m in self.adam_m]
        clone.adam_v = [v.copy() for v in self.adam_v]
        clone.adam_t = self.adam_t
        return clone


@dataclass(frozen=True)
class GreedyQPolicy:
    """Deterministic argmax policy over a frozen Q snapshot."""

    q: QFunction
    env: EpisodicMDP

    def act(self, obs: Any, step: int, rng: np.random.Generator) -> int:
        feats = self.env.features_from_obs(obs, step)
        return int(self.q.greedy(feats[None])[0])


class ReplayBuffer:
    """Fixed-capacity ring buffer over (features, action, reward vector, next, done)."""

    def __init__(self, capacity: int, feature_dim: int, reward_dim: int) -> None:
        self.capacity = int(capacity)
        self.features = np.zeros((capacity, feature_dim))
        self.next_features = np.zeros((capacity, feature_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros((capacity, reward_dim))
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.cursor = 0

    def push(self, feats, action, reward, next_feats, done) -> None:
        i = self.cursor
        self.features[i] = feats
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_features[i] = next_feats
        self.dones[i] = done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=batch_size)
        return (self.features[idx], self.actions[idx], self.rewards[idx], self.next_features[idx], self.dones[idx])


@dataclass
class BestResponseResult:
    policy: GreedyQPolicy
    curve: list  # rows (episode, scalarized return, per-objective returns...)
    q: QFunction
    episodes_trained: int


class BestResponseLearner:
    """Persistent learner state: network, replay buffer and episode counters.

    One ``train_round`` call is one learner update round.  By default the
    parameters, buffer and exploration schedule carry over between rounds;
    with ``retrain`` everything is reinitialized per round from a seed folded
    with the round index.
    """

    def __init__(self, env: EpisodicMDP, cfg: LearnerConfig) -> None:
        self.env = env
        self.cfg = cfg
        probe = env.features_from_obs(env.observe(env.init_state(0)), 0)
        self.feature_dim = int(np.asarray(probe).size)
        self.rounds_run = 0
        self.episodes_trained = 0
        self.updates_done = 0
        self._init_state(round_idx=0)

    def _init_state(self, round_idx: int) -> None:
        rng = spawn_rng(self.cfg.seed, 0x1EA4, round_idx)
        self.q = QFunction(self.feature_dim, self.cfg.hidden_sizes, self.env.n_actions, self.cfg.learning_rate, rng)
        self.buffer = ReplayBuffer(self.cfg.replay_capacity, self.feature_dim, self.env.reward_dim)
        self.rng = spawn_rng(self.cfg.seed, 0xACC7, round_idx)
        self.episodes_trained = 0
        self.updates_done = 0

    def _epsilon(self) -> float:
        span = self.cfg.eps_start - self.cfg.eps_end
        return self.cfg.eps_end + span * self.cfg.eps_decay**self.episodes_trained

    def train_round(self, spec: ScalarizedSpec) -> BestResponseResult:
        if spec.m + 1 != self.env.reward_dim:
            raise ValueError(f"spec has {spec.m} constraints but the environment emits {self.env.reward_dim} reward components")
        if self.cfg.retrain and self.rounds_run > 0:
            self._init_state(round_idx=self.rounds_run)
        round_idx = self.rounds_run
        curve = []
        for ep in range(self.cfg.episodes_per_round):
            episode = self.episodes_trained
            eps = self._epsilon()
            seed = int(np.random.SeedSequence([self.cfg.seed, 0xE9, round_idx, ep]).generate_state(1)[0])
            state = self.env.init_state(seed)
            feats = self.env.features_from_obs(self.env.observe(state), 0)
            totals = np.zeros(self.env.reward_dim)
            scalar_return = 0.0
            for t in range(self.env.horizon):
                if self.rng.random() < eps:
                    action = int(self.rng.integers(self.env.n_actions))
                else:
                    action = int(self.q.greedy(feats[None])[0])
                state, reward = self.env.step(state, action)
                next_feats = self.env.features_from_obs(self.env.observe(state), t + 1)
                totals += reward
                scalar_return += scalarize(reward, spec)
                self.buffer.push(feats, action, reward, next_feats, t == self.env.horizon - 1)
                feats = next_feats
                if self.buffer.size >= self.cfg.batch_size:
                    self._update(spec, episode)
            curve.append((episode, scalar_return, *totals))
            self.episodes_trained += 1
        self.rounds_run += 1
        snapshot = self.q.snapshot()
        return BestResponseResult(
            policy=GreedyQPolicy(q=snapshot, env=self.env),
            curve=curve,
            q=snapshot,
            episodes_trained=self.episodes_trained,
        )

    def _update(self, spec: ScalarizedSpec, episode: int) -> None:
        feats, actions, rewards, next_feats, dones = self.buffer.sample(self.cfg.batch_size, self.rng)
        future = self.q.predict_target(next_feats).max(axis=1)
        targets = scalarize(rewards, spec) + np.where(dones, 0.0, future)
        try:
            self.q.gradient_step(feats, actions, targets)
        except FloatingPointError:
            raise TrainingDiverged(episode) from None
        self.updates_done += 1
        if self.updates_done % self.cfg.target_sync == 0:
            self.q.sync_target()


def train_best_response(env: EpisodicMDP, spec: ScalarizedSpec, cfg: LearnerConfig) -> BestResponseResult:
    """One self-contained learner round on a fresh learner."""
    return BestResponseLearner(env, cfg).train_round(spec)


def tabularize_policy(env: TabularMDP, policy) -> TabularPolicy:
    """Exact tabular form of a policy on a finite instance."""
    if isinstance(policy, TabularPolicy):
        return policy
    if isinstance(policy, GreedyQPolicy):
        actions = np.zeros((env.horizon, env.n_states), dtype=np.int64)
        for h in range(env.horizon):
            feats = np.stack([env.features_from_obs(s, h) for s in range(env.n_states)])
            actions[h] = policy.q.greedy(feats)
        return TabularPolicy.deterministic(actions, env.n_actions)
    raise TypeError(f"cannot tabularize policy of type {type(policy).__name__}")


def best_response_gap(env: TabularMDP, policy, spec: ScalarizedSpec) -> float:
    """Exact suboptimality of a policy under the scalarized reward.

    Computes the optimal scalarized value by backward induction and the
    policy's value through its occupancy measure, so the result is exact up
    to float arithmetic and never meaningfully negative.
    """
    if not isinstance(env, TabularMDP):
        raise TypeError("best-response gaps are only defined on tabular instances")
    table = scalarized_table(env.rewards, spec)
    optimum, _ = backward_induction(env, table)
    occ = occupancy_of_policy(env, tabularize_policy(env, policy))
    achieved = value_from_occupancy(occ, table)
    return optimum - achieved


def write_training_curve(path: str | Path, curve: Sequence[Sequence], reward_dim: int) -> None:
    """CSV of per-episode returns: scalarized plus each objective component."""
    header = ["episode", "scalarized_return", *[f"return_{i}" for i in range(reward_dim)]]
    write_csv(path, header, curve)


def save_checkpoint(path: str | Path, q: QFunction, cfg: LearnerConfig, episodes_trained: int = 0) -> None:
    """Versioned parameter blob with the config hash baked in."""
    arrays = {
        "format": np.array(CHECKPOINT_TAG),
        "config_hash": np.array(config_hash(cfg)),
        "n_layers": np.array(len(q.weights)),
        "adam_t": np.array(q.adam_t),
        "episodes_trained": np.array(episodes_trained),
        "learning_rate": np.array(q.learning_rate),
    }
    for i, (w, b) in enumerate(zip(q.weights, q.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
        arrays[f"tw{i}"] = q.target_weights[i]
        arrays[f"tb{i}"] = q.target_biases[i]
    for i, (m, v) in enumerate(zip(q.adam_m, q.adam_v)):
        arrays[f"am{i}"] = m
        arrays[f"av{i}"] = v
    np.savez_compressed(path, **arrays)


def load_checkpoint(path: str | Path, cfg: LearnerConfig) -> tuple[QFunction, int]:
    """Restore a checkpoint; refuses blobs from a different config or format."""
    blob = np.load(path, allow_pickle=False)
    if str(blob["format"]) != CHECKPOINT_TAG:
        raise ValueError(f"unrecognized checkpoint format {blob['format']!r}")
    if str(blob["config_hash"]) != config_hash(cfg):
        raise ValueError("checkpoint was written under a different learner config")
    n_layers = int(blob["n_layers"])
    q = QFunction.__new__(QFunction)
    q.learning_rate = float(blob["learning_rate"])
    q.weights = [blob[f"w{i}"].copy() for i in range(n_layers)]
    q.biases = [blob[f"b{i}"].copy() for i in range(n_layers)]
    q.target_weights = [blob[f"tw{i}"].copy() for i in range(n_layers)]
    q.target_biases = [blob[f"tb{i}"].copy() for i in range(n_layers)]
    q.adam_m = [blob[f"am{i}"].copy() for i in range(2 * n_layers)]
    q.adam_v = [blob[f"av{i}"].copy() for i in range(2 * n_layers)]
    q.adam_t = int(blob["adam_t"])
    q.sizes = [q.weights[0].shape[0], *[w.shape[1] for w in q.weights]]
    return q, int(blob["episodes_trained"])
