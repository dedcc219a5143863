"""Repeated zero-sum game: best-response learner against a no-regret regulator.

Each round the learner maximizes the scalarized reward at the current
multiplier vector; the regulator then takes one projected gradient step
against the measured constraint slacks.  The trace keeps every round policy,
so the time-averaged strategy is an honest uniform mixture over checkpoints,
never a parameter average.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env_sim import WarehouseSim, max_signal
from .learner import (
    BestResponseLearner,
    LearnerConfig,
    ScalarizedSpec,
    TrainingDiverged,
    save_checkpoint,
    scalarized_table,
)
from .mdp_core import (
    EpisodicMDP,
    PolicyMixture,
    TabularMDP,
    TabularPolicy,
    ValueVector,
    backward_induction,
    estimate_values,
    occupancy_of_policy,
    value_from_occupancy,
)
from .regulator import (
    ConstraintSpec,
    compute_slacks,
    lambda_diameter,
    ogd_step,
    theoretical_step_size,
)
from .util import canonical_json, write_csv

__all__ = [
    "GameConfig",
    "RoundRecord",
    "GameTrace",
    "canonical_game_spec",
    "gradient_bound",
    "lagrangian",
    "run_repeated_game",
    "evaluate_mixture",
    "write_round_log",
    "write_manifest",
    "save_policy_table",
    "load_policy_table",
]

MANIFEST_SCHEMA = "totegame-game v1"
POLICY_TABLE_TAG = "totegame-tabpolicy v1"


def canonical_game_spec(m: int, cap: float) -> ConstraintSpec:
    """Slack-identity constraint spec: feeds on environments whose constraint
    rewards are already emitted in signed-slack form, so the slack of value
    vector v is exactly v[1:]."""
    return ConstraintSpec(
        alpha=np.zeros(m),
        sign=-np.ones(m),
        cap=cap,
        labels=tuple(f"g{i + 1}" for i in range(m)),
    )


def gradient_bound(env: EpisodicMDP, spec: ConstraintSpec) -> float:
    """Deterministic l2 bound on any realizable slack vector.

    Tabular: |V_i| <= H * max|r_i|.  Warehouse: episode constraint values are
    level-unit slacks bounded by the threshold magnitude plus the worst
    signal, which is capped by the total tote population.
    """
    if isinstance(env, TabularMDP):
        per_value = env.horizon * np.abs(env.rewards[1:]).max(axis=(1, 2))
    elif isinstance(env, WarehouseSim):
        per_value = np.abs(env.spec.alpha) + max_signal(env.config)
    else:
        raise TypeError(f"no slack bound rule for {type(env).__name__}")
    return float(np.linalg.norm(np.abs(spec.alpha) + per_value))


def lagrangian(values, lam, spec: ConstraintSpec) -> float:
    """Objective value plus multiplier-weighted slacks: v_0 + lam . g(v)."""
    vec = values.values if isinstance(values, ValueVector) else np.asarray(values, dtype=np.float64)
    lam_vec = np.asarray(getattr(lam, "values", lam), dtype=np.float64)
    slacks = compute_slacks(vec, spec)
    if lam_vec.shape != slacks.shape:
        raise ValueError(f"need {slacks.size} multipliers, got {lam_vec.shape}")
    return float(vec[0] + lam_vec @ slacks)


@dataclass(frozen=True)
class GameConfig:
    """Inputs of one repeated-game run.

    ``eta=None`` resolves to the D/(G sqrt(T)) schedule using ``grad_bound``
    (itself derived from the environment when omitted).  ``best_response``
    is ``"exact"`` (tabular dynamic programming), ``"dqn"``, or ``"auto"``.
    ``conservative_slack`` tightens the slacks fed to the regulator without
    touching the recorded ones.
    """

    env: EpisodicMDP
    spec: ConstraintSpec
    rounds: int
    eta: float | None = None
    grad_bound: float | None = None
    n_eval: int = 30
    seed: int = 0
    learner: LearnerConfig | None = None
    best_response: str = "auto"
    lambda0: np.ndarray | None = None
    conservative_slack: np.ndarray | None = None
    run_dir: str | None = None

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("need at least one round")
        if self.n_eval < 1:
            raise ValueError("need at least one evaluation episode")
        if self.best_response not in ("auto", "exact", "dqn"):
            raise ValueError(f"unknown best_response mode {self.best_response!r}")
        if self.spec.m + 1 != self.env.reward_dim:
            raise ValueError(
                f"spec has {self.spec.m} constraints but the environment emits "
                f"{self.env.reward_dim} reward components"
            )
        for name in ("lambda0", "conservative_slack"):
            value = getattr(self, name)
            if value is None:
                continue
            value = np.asarray(value, dtype=np.float64)
            object.__setattr__(self, name, value)
            if value.shape != (self.spec.m,):
                raise ValueError(f"{name} must have one entry per constraint")
        if self.lambda0 is not None:
            if np.any(self.lambda0 < 0.0) or float(self.lambda0.sum()) > self.spec.cap:
                raise ValueError("lambda0 must lie in the multiplier set")
        if self.conservative_slack is not None and np.any(self.conservative_slack < 0.0):
            raise ValueError("conservative_slack entries must be nonnegative")
        if self.eta is not None and not self.eta > 0.0:
            raise ValueError("eta must be positive")

    @property
    def mode(self) -> str:
        if self.best_response != "auto":
            return self.best_response
        return "exact" if isinstance(self.env, TabularMDP) else "dqn"

    def resolve_eta(self) -> float:
        if self.eta is not None:
            return float(self.eta)
        bound = self.grad_bound if self.grad_bound is not None else gradient_bound(self.env, self.spec)
        return theoretical_step_size(lambda_diameter(self.spec.cap, self.spec.m), bound, self.rounds)


@dataclass(frozen=True)
class RoundRecord:
    """One completed round.

    ``lambda_prev`` is the multiplier the round's policy responded to;
    ``lam`` is the post-update multiplier and ``lambda_bar`` the running mean
    of post-update multipliers.  ``lagrangian`` is evaluated at
    ``lambda_prev``, the price the learner actually saw.  ``slacks`` are the
    raw measured slacks (conservative tightening only affects the regulator
    feed).
    """

    round: int
    checkpoint: str
    lambda_prev: np.ndarray
    lam: np.ndarray
    lambda_bar: np.ndarray
    values: ValueVector
    slacks: np.ndarray
    lagrangian: float
    feasible: bool
    eval_seed: int


@dataclass
class GameTrace:
    """Append-only round history plus the policies behind the mixture."""

    spec: ConstraintSpec
    eta: float
    records: list = field(default_factory=list)
    policies: list = field(default_factory=list)
    diverged_round: int | None = None

    @property
    def rounds_completed(self) -> int:
        return len(self.records)

    @property
    def lambda_bar(self) -> np.ndarray:
        if not self.records:
            raise ValueError("no completed rounds")
        return self.records[-1].lambda_bar

    @property
    def responded_lambda_bar(self) -> np.ndarray:
        """Average of the multipliers the round policies responded to.

        This is the average at which the no-regret argument bounds both
        equilibrium gaps; it trails ``lambda_bar`` by one update.
        """
        if not self.records:
            raise ValueError("no completed rounds")
        return np.mean([record.lambda_prev for record in self.records], axis=0)

    def mixture(self, upto_round: int | None = None) -> PolicyMixture:
        upto = self.rounds_completed if upto_round is None else int(upto_round)
        if not 1 <= upto <= self.rounds_completed:
            raise ValueError(f"no checkpoints for rounds 1..{upto}")
        members = tuple(self.policies[:upto])
        return PolicyMixture(members, np.full(upto, 1.0 / upto))

    def multiplier_history(self) -> tuple[np.ndarray, np.ndarray]:
        """(played multipliers, slack outcomes) stacked by round, for regret."""
        prevs = np.stack([record.lambda_prev for record in self.records])
        slacks = np.stack([record.slacks for record in self.records])
        return prevs, slacks


def _round_seed(seed: int, tag: int, round_index: int) -> int:
    return int(np.random.SeedSequence([seed, tag, round_index]).generate_state(1)[0])


def _exact_values(mdp: TabularMDP, policy: TabularPolicy) -> ValueVector:
    values = value_from_occupancy(occupancy_of_policy(mdp, policy), mdp.rewards)
    return ValueVector(values=values, stderr=np.zeros_like(values), n_episodes=0)


def _exact_best_response(mdp: TabularMDP, scal: ScalarizedSpec) -> TabularPolicy:
    table = scalarized_table(mdp.rewards, scal)
    _, actions = backward_induction(mdp, table)
    return TabularPolicy.deterministic(actions, mdp.n_actions)


def save_policy_table(path: str | Path, policy: TabularPolicy) -> None:
    np.savez(path, format=np.array(POLICY_TABLE_TAG), table=policy.table)


def load_policy_table(path: str | Path) -> TabularPolicy:
    with np.load(path) as blob:
        if str(blob["format"]) != POLICY_TABLE_TAG:
            raise ValueError(f"not a policy table file: {path}")
        return TabularPolicy(blob["table"])


def run_repeated_game(cfg: GameConfig) -> GameTrace:
    """Alternate best response and projected OGD for ``cfg.rounds`` rounds.

    Round t: train a best response to the current multiplier, evaluate it
    (exact dynamic programming when tabular, otherwise ``n_eval`` fresh
    greedy episodes), compute slacks, update the multiplier, and append the
    record.  Learner divergence stops the loop with the partial trace
    preserved.  Fully reproducible from the config.
    """
    env, spec = cfg.env, cfg.spec
    mode = cfg.mode
    eta = cfg.resolve_eta()
    delta = cfg.conservative_slack if cfg.conservative_slack is not None else np.zeros(spec.m)
    lam = np.zeros(spec.m) if cfg.lambda0 is None else cfg.lambda0.copy()

    learner = None
    if mode == "dqn":
        learner_cfg = cfg.learner if cfg.learner is not None else LearnerConfig(seed=cfg.seed)
        learner = BestResponseLearner(env, learner_cfg)

    run_dir = Path(cfg.run_dir) if cfg.run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    trace = GameTrace(spec=spec, eta=eta)
    lam_sum = np.zeros(spec.m)
    for t in range(1, cfg.rounds + 1):
        lambda_prev = lam.copy()
        scal = ScalarizedSpec(lam=lambda_prev, alpha=spec.alpha, sign=spec.sign, horizon=env.horizon)
        result = None
        if mode == "exact":
            policy = _exact_best_response(env, scal)
        else:
            try:
                result = learner.train_round(scal)
            except TrainingDiverged:
                trace.diverged_round = t
                break
            policy = result.policy

        eval_seed = _round_seed(cfg.seed, 0xEA1, t)
        if mode == "exact":
            values = _exact_values(env, policy)
        else:
            values = estimate_values(env, policy, cfg.n_eval, eval_seed)

        slacks = compute_slacks(values.values, spec)
        feasible = bool(slacks.min() >= 0.0)
        value_at_prev = lagrangian(values, lambda_prev, spec)

        lam = ogd_step(lam, slacks - delta, eta, spec.cap)
        lam_sum += lam

        checkpoint = f"round_{t:04d}"
        if run_dir is not None:
            path = run_dir / "checkpoints" / f"{checkpoint}.npz"
            if result is not None:
                save_checkpoint(path, result.q, learner.cfg, result.episodes_trained)
            else:
                save_policy_table(path, policy)

        trace.records.append(
            RoundRecord(
                round=t,
                checkpoint=checkpoint,
                lambda_prev=lambda_prev,
                lam=lam.copy(),
                lambda_bar=lam_sum / t,
                values=values,
                slacks=slacks,
                lagrangian=value_at_prev,
                feasible=feasible,
                eval_seed=eval_seed,
            )
        )
        trace.policies.append(policy)

    if run_dir is not None:
        write_round_log(trace, run_dir / "rounds.csv")
        write_manifest(trace, cfg, run_dir / "manifest.json")
    return trace


def evaluate_mixture(
    trace: GameTrace,
    upto_round: int,
    env: EpisodicMDP,
    episodes: int,
    seed: int,
) -> ValueVector:
    """Monte Carlo values of the uniform mixture over rounds 1..upto_round.

    Each episode draws one member policy, matching how the time-averaged
    strategy would actually be deployed.
    """
    mixture = trace.mixture(upto_round)
    return estimate_values(env, mixture, episodes, seed)


def write_round_log(trace: GameTrace, path: str | Path) -> None:
    """CSV of the per-round quantities behind the usual training plots."""
    m = trace.spec.m
    header = (
        ["round", "v_0"]
        + [f"g_{i + 1}" for i in range(m)]
        + [f"lam_{i + 1}" for i in range(m)]
        + [f"lbar_{i + 1}" for i in range(m)]
        + ["L", "feasible"]
    )
    rows = []
    for record in trace.records:
        rows.append(
            [record.round, float(record.values.values[0])]
            + [float(x) for x in record.slacks]
            + [float(x) for x in record.lam]
            + [float(x) for x in record.lambda_bar]
            + [record.lagrangian, int(record.feasible)]
        )
    write_csv(path, header, rows)


def write_manifest(trace: GameTrace, cfg: GameConfig, path: str | Path) -> None:
    """Round-to-checkpoint map plus the resolved run parameters."""
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "rounds_completed": trace.rounds_completed,
        "mode": cfg.mode,
        "eta": trace.eta,
        "n_eval": cfg.n_eval,
        "cap": trace.spec.cap,
        "diverged_round": trace.diverged_round,
        "entries": [
            {
                "round": record.round,
                "checkpoint": f"checkpoints/{record.checkpoint}.npz",
                "eval_seed": record.eval_seed,
                "feasible": record.feasible,
            }
            for record in trace.records
        ],
    }
    Path(path).write_text(canonical_json(manifest) + "\n")
