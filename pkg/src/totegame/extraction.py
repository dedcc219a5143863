"""Single-iterate extraction for the positive-part game.

Time-averaged mixtures from the repeated game can look feasible while every
policy in their support violates some constraint: signed slacks cancel across
rounds.  Penalizing ``lam * [max_i(V_i - alpha_i)]_+`` instead removes the
cancellation channel.  This module budgets the Monte Carlo estimates that
rank the round policies under the averaged multiplier, selects the
estimated-best round, and certifies the selection on tabular instances
against a grid-solved minimax value of the reformulated game.

Constraints here use the one-sided orientation: constraint signal values
``V_i`` with thresholds ``alpha_i`` and violations ``V_i - alpha_i``, any
signs already folded into the threshold assignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .mdp_core import (
    EpisodicMDP,
    Policy,
    PolicyMixture,
    TabularMDP,
    TabularPolicy,
    ValueVector,
    estimate_values,
    occupancy_of_policy,
    value_from_occupancy,
)
from .util import write_csv

__all__ = [
    "ReformSpec",
    "IterateEstimate",
    "ReformGameValue",
    "ExtractionReport",
    "CancellationReport",
    "positive_part_violation",
    "reformulated_lagrangian",
    "required_samples",
    "estimate_iterates",
    "select_best_iterate",
    "jensen_gap",
    "bridge_multiplier",
    "exact_policy_values",
    "exact_best_response_value",
    "reformulated_game_value",
    "extraction_certificate",
    "concentration_coverage",
    "safe_left_right_mdp",
    "cancellation_demo",
    "write_estimate_table",
    "format_certificate",
]

ESTIMATE_COLUMNS = ("t", "v0_hat", "g_hat", "l_hat", "n")

_ITERATE_TAG = 0x5E17
_REPEAT_TAG = 0xC0E


@dataclass(frozen=True)
class ReformSpec:
    """Thresholds and estimation budget for the reformulated game.

    ``horizon`` doubles as the value bound: with per-step signals in [0, 1],
    every episodic value lies in [0, horizon], so thresholds must lie in
    [-horizon, horizon] and ``[g]_+`` in [0, 2 * horizon].
    """

    alpha: np.ndarray
    lambda_bar: float
    horizon: int
    epsilon: float
    delta: float
    rounds: int

    def __post_init__(self) -> None:
        alpha = np.asarray(self.alpha, dtype=np.float64)
        object.__setattr__(self, "alpha", alpha)
        if alpha.ndim != 1 or alpha.size < 1:
            raise ValueError("alpha must be a nonempty vector")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if np.any(np.abs(alpha) > self.horizon):
            raise ValueError("thresholds must lie in [-horizon, horizon]")
        if self.lambda_bar < 0.0:
            raise ValueError("lambda_bar must be nonnegative")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")

    @property
    def m(self) -> int:
        return self.alpha.size


@dataclass(frozen=True)
class IterateEstimate:
    """Monte Carlo summary of one round policy under the averaged multiplier."""

    round: int
    v0_hat: float
    constraints_hat: np.ndarray
    g_hat: float
    lagrangian_hat: float
    n_episodes: int


def positive_part_violation(values, spec: ReformSpec) -> tuple[float, float]:
    """Worst signed violation and its positive part.

    ``values`` carries the objective in slot 0 and the m constraint values
    after it; only the constraint slots enter the max.
    """
    vec = values.values if isinstance(values, ValueVector) else np.asarray(values, dtype=np.float64)
    if vec.shape != (spec.m + 1,):
        raise ValueError(f"need {spec.m + 1} value entries, got {vec.shape}")
    g = float(np.max(vec[1:] - spec.alpha))
    return g, max(g, 0.0)


def reformulated_lagrangian(v0: float, g_plus: float, lam: float) -> float:
    """Objective minus the priced positive-part violation: v0 - lam * g_plus."""
    return float(v0) - float(lam) * float(g_plus)


def required_samples(spec: ReformSpec) -> int:
    """Smallest episode count that makes every round estimate epsilon-accurate.

    A single episode's Lagrangian sample sits in an interval of width
    ``(1 + 2 * lambda_bar) * horizon``, so Hoeffding plus a union bound over
    the ``rounds`` iterates needs
    ``(1 + 2 lam)^2 H^2 / (2 eps^2) * ln(2 T / delta)`` samples.
    """
    width = (1.0 + 2.0 * spec.lambda_bar) * spec.horizon
    bound = width * width / (2.0 * spec.epsilon**2) * math.log(2.0 * spec.rounds / spec.delta)
    return max(1, math.ceil(bound))


def _iterate_seed(seed: int, tag: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, tag, index]).generate_state(1)[0])


def estimate_iterates(
    policies: Sequence[Policy],
    spec: ReformSpec,
    env: EpisodicMDP,
    seed: int,
    n_episodes: int | None = None,
) -> tuple[IterateEstimate, ...]:
    """Fresh Monte Carlo estimate table, one row per round policy.

    Each row uses ``n`` i.i.d. episodes with the policy (a mixture draws one
    member per episode), paired across the objective and constraint channels.
    """
    if not policies:
        raise ValueError("no checkpoints to estimate")
    if env.reward_dim != spec.m + 1:
        raise ValueError(
            f"environment emits {env.reward_dim} reward components, spec expects {spec.m + 1}"
        )
    n = required_samples(spec) if n_episodes is None else int(n_episodes)
    if n < 1:
        raise ValueError("need at least one episode per iterate")
    table = []
    for t, policy in enumerate(policies, start=1):
        values = estimate_values(env, policy, n, _iterate_seed(seed, _ITERATE_TAG, t))
        g, g_plus = positive_part_violation(values, spec)
        table.append(
            IterateEstimate(
                round=t,
                v0_hat=float(values.values[0]),
                constraints_hat=values.values[1:].copy(),
                g_hat=g,
                lagrangian_hat=reformulated_lagrangian(values.values[0], g_plus, spec.lambda_bar),
                n_episodes=n,
            )
        )
    return tuple(table)


def select_best_iterate(
    policies: Sequence[Policy],
    spec: ReformSpec,
    env: EpisodicMDP,
    seed: int,
    n_episodes: int | None = None,
) -> tuple[int, tuple[IterateEstimate, ...]]:
    """Round with the best estimated Lagrangian, ties to the earliest round.

    Returns the 1-based winning round plus the whole estimate table so the
    selection can be audited.
    """
    table = estimate_iterates(policies, spec, env, seed, n_episodes)
    t_star = 1
    for row in table[1:]:
        if row.lagrangian_hat > table[t_star - 1].lagrangian_hat:
            t_star = row.round
    return t_star, table


def jensen_gap(mixture_value: float, iterate_values: Sequence[float]) -> float:
    """Mixture Lagrangian minus the iterate average; nonnegative by concavity."""
    values = np.asarray(iterate_values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("need at least one iterate value")
    return float(mixture_value - values.mean())


def bridge_multiplier(lam: np.ndarray) -> float:
    """Scalar multiplier for the aggregated constraint: the l1 norm of the
    vector multiplier from the per-constraint game."""
    return float(np.abs(np.asarray(lam, dtype=np.float64)).sum())


def exact_policy_values(mdp: TabularMDP, policy) -> np.ndarray:
    """Exact value vector by dynamic programming; mixtures combine members."""
    if isinstance(policy, PolicyMixture):
        members = np.stack([exact_policy_values(mdp, member) for member in policy.members])
        return policy.weights @ members
    return value_from_occupancy(occupancy_of_policy(mdp, policy), mdp.rewards)


def _exact_reform_lagrangian(mdp: TabularMDP, policy, spec: ReformSpec) -> float:
    values = exact_policy_values(mdp, policy)
    _, g_plus = positive_part_violation(values, spec)
    return reformulated_lagrangian(values[0], g_plus, spec.lambda_bar)


@dataclass(frozen=True)
class ReformGameValue:
    """Upper bound on min over lam of max over D of L(D, lam).

    Every probe solves the inner maximum exactly, so the bound is tight up
    to the multiplier grid spacing and linear-programming tolerance.
    """

    value: float
    lam: float


def exact_best_response_value(mdp: TabularMDP, lam: float, alphas: np.ndarray) -> float:
    """Exact max over D of <r_0, d> - lam * [max_i(<c_i, d> - alpha_i)]_+.

    The positive part has a linear epigraph (u >= <c_i, d> - alpha_i, u >= 0),
    so the concave maximum over the occupancy polytope is one linear program
    in the step-indexed occupancy variables plus u.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    horizon, n_states, n_actions = mdp.horizon, mdp.n_states, mdp.n_actions
    block = n_states * n_actions
    n_vars = horizon * block + 1  # occupancies plus the violation epigraph u

    cost = np.concatenate([np.tile(-mdp.rewards[0].reshape(-1), horizon), [float(lam)]])

    flow = np.zeros((horizon * n_states, n_vars))
    flow_rhs = np.zeros(horizon * n_states)
    # inflow P(s' -> s) viewed from the previous step's occupancy block
    inflow = mdp.transitions.reshape(block, n_states)
    for h in range(horizon):
        for s in range(n_states):
            row = flow[h * n_states + s]
            row[h * block + s * n_actions : h * block + (s + 1) * n_actions] = 1.0
            if h == 0:
                flow_rhs[s] = mdp.init_dist[s]
            else:
                row[(h - 1) * block : h * block] = -inflow[:, s]

    violation = np.zeros((alphas.size, n_vars))
    for i in range(alphas.size):
        violation[i, :-1] = np.tile(mdp.rewards[i + 1].reshape(-1), horizon)
        violation[i, -1] = -1.0
    result = linprog(
        c=cost,
        A_ub=violation,
        b_ub=alphas,
        A_eq=flow,
        b_eq=flow_rhs,
        bounds=[(0.0, None)] * n_vars,
        method="highs",
    )
    if not result.success:
        raise RuntimeError(f"best-response linear program failed: {result.message}")
    return float(-result.fun)


def reformulated_game_value(
    mdp: TabularMDP,
    alphas: np.ndarray,
    cap: float,
    extra_lams: Sequence[float] = (),
    grid_points: int = 21,
    refinements: int = 2,
) -> ReformGameValue:
    """Grid-with-refinement minimax value of the reformulated game.

    The inner maximum is solved exactly at each probed multiplier, so the
    minimum over probes upper-bounds the game value; since the inner maximum
    is convex in the multiplier, refining around the grid argmin converges to
    the true minimum.  ``extra_lams`` forces specific multipliers (the
    averaged one, usually) into the probe set.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    if cap <= 0.0:
        raise ValueError("cap must be positive")

    best_value, best_lam = math.inf, 0.0
    lo, hi = 0.0, float(cap)
    for _ in range(refinements + 1):
        grid = np.linspace(lo, hi, grid_points)
        values = [exact_best_response_value(mdp, float(lam), alphas) for lam in grid]
        idx = int(np.argmin(values))
        if values[idx] < best_value:
            best_value, best_lam = values[idx], float(grid[idx])
        spacing = (hi - lo) / (grid_points - 1)
        lo = max(0.0, grid[idx] - spacing)
        hi = min(float(cap), grid[idx] + spacing)
    for lam in extra_lams:
        value = exact_best_response_value(mdp, float(lam), alphas)
        if value < best_value:
            best_value, best_lam = value, float(lam)
    return ReformGameValue(value=best_value, lam=best_lam)


@dataclass(frozen=True)
class ExtractionReport:
    """Audit trail for one extraction: measured errors and the value bound.

    ``game_value`` is an upper bound on the true minimax value, so ``holds``
    asserts a statement at least as strong as the selection guarantee
    ``L(D_t*, lambda_bar) >= L* - (nu + 2 eps + jensen)`` with every term
    measured on this run rather than assumed.
    """

    t_star: int
    lambda_bar: float
    cap: float
    bridged_from_vector: bool
    game_value: float
    game_value_lam: float
    nu_learner: float
    nu_regulator: float
    nu: float
    epsilon_target: float
    epsilon_measured: float
    jensen: float
    exact_lagrangians: np.ndarray
    lagrangian_at_star: float
    bound: float
    slack: float
    holds: bool
    support_member: int
    certifying_lagrangian: float
    estimates: tuple[IterateEstimate, ...]


def extraction_certificate(
    mdp: TabularMDP,
    policies: Sequence[Policy],
    t_star: int,
    estimates: Sequence[IterateEstimate],
    spec: ReformSpec,
    cap: float,
    bridged_from_vector: bool = False,
) -> ExtractionReport:
    """Check the selected round against the reformulated minimax value.

    Everything is measured: exact per-round Lagrangians by dynamic
    programming, the estimation error from the supplied table, the
    equilibrium error of the (mixture, multiplier) pair, and the Jensen gap.
    The asserted inequality then holds or fails on this run's numbers alone.
    """
    if not isinstance(mdp, TabularMDP):
        raise TypeError("certificates need a tabular instance with exact values")
    if not 1 <= t_star <= len(policies):
        raise ValueError(f"t_star {t_star} outside 1..{len(policies)}")
    if len(estimates) != len(policies):
        raise ValueError("estimate table and checkpoint list disagree")
    if not 0.0 <= spec.lambda_bar <= cap:
        raise ValueError("lambda_bar must lie in [0, cap]")

    exact_l = np.array([_exact_reform_lagrangian(mdp, policy, spec) for policy in policies])
    mixture = PolicyMixture(tuple(policies), np.full(len(policies), 1.0 / len(policies)))
    mixture_values = exact_policy_values(mdp, mixture)
    _, mixture_gplus = positive_part_violation(mixture_values, spec)
    mixture_l = reformulated_lagrangian(mixture_values[0], mixture_gplus, spec.lambda_bar)

    jensen = jensen_gap(mixture_l, exact_l)
    epsilon_measured = float(
        max(abs(row.lagrangian_hat - exact) for row, exact in zip(estimates, exact_l))
    )

    game = reformulated_game_value(mdp, spec.alpha, cap, extra_lams=(spec.lambda_bar,))
    best_response_value = exact_best_response_value(mdp, spec.lambda_bar, spec.alpha)
    nu_learner = best_response_value - mixture_l
    # min over lam in [0, cap] of a line with slope -[g]_+ sits at lam = cap
    nu_regulator = (cap - spec.lambda_bar) * mixture_gplus
    nu = max(nu_learner, nu_regulator, 0.0)

    selected = policies[t_star - 1]
    if isinstance(selected, PolicyMixture) and len(selected.members) > 1:
        member_l = [_exact_reform_lagrangian(mdp, member, spec) for member in selected.members]
        support_member = int(np.argmax(member_l))
        certifying_l = float(member_l[support_member])
    else:
        support_member = 0
        certifying_l = float(exact_l[t_star - 1])

    bound = min(game.value, best_response_value) - (nu + 2.0 * epsilon_measured + jensen)
    slack = float(exact_l[t_star - 1] - bound)
    return ExtractionReport(
        t_star=t_star,
        lambda_bar=spec.lambda_bar,
        cap=cap,
        bridged_from_vector=bridged_from_vector,
        game_value=game.value,
        game_value_lam=game.lam,
        nu_learner=float(nu_learner),
        nu_regulator=float(nu_regulator),
        nu=float(nu),
        epsilon_target=spec.epsilon,
        epsilon_measured=epsilon_measured,
        jensen=jensen,
        exact_lagrangians=exact_l,
        lagrangian_at_star=float(exact_l[t_star - 1]),
        bound=float(bound),
        slack=slack,
        holds=bool(slack >= -1e-7),
        support_member=support_member,
        certifying_lagrangian=certifying_l,
        estimates=tuple(estimates),
    )


@dataclass(frozen=True)
class CoverageReport:
    """Concentration check: how often the estimate table stayed within epsilon."""

    hits: int
    repetitions: int
    n_episodes: int
    epsilon: float
    worst_deviation: float

    @property
    def rate(self) -> float:
        return self.hits / self.repetitions


def concentration_coverage(
    mdp: TabularMDP,
    policies: Sequence[Policy],
    spec: ReformSpec,
    repetitions: int,
    seed: int,
    n_episodes: int | None = None,
) -> CoverageReport:
    """Repeated estimation runs against exact values on a tabular instance.

    One repetition estimates every policy with the budgeted episode count and
    scores a hit when the worst Lagrangian deviation stays within epsilon.
    """
    if repetitions < 1:
        raise ValueError("need at least one repetition")
    exact_l = np.array([_exact_reform_lagrangian(mdp, policy, spec) for policy in policies])
    n = required_samples(spec) if n_episodes is None else int(n_episodes)
    hits = 0
    worst = 0.0
    for rep in range(repetitions):
        table = estimate_iterates(
            policies, spec, mdp, _iterate_seed(seed, _REPEAT_TAG, rep), n_episodes=n
        )
        deviation = max(abs(row.lagrangian_hat - exact) for row, exact in zip(table, exact_l))
        worst = max(worst, deviation)
        hits += deviation <= spec.epsilon
    return CoverageReport(
        hits=hits,
        repetitions=repetitions,
        n_episodes=n,
        epsilon=spec.epsilon,
        worst_deviation=float(worst),
    )


# --- cancellation demo ----------------------------------------------------

SAFE, LEFT_STATE, RIGHT_STATE = 0, 1, 2
STAY, GO_LEFT, GO_RIGHT = 0, 1, 2


def safe_left_right_mdp(horizon: int) -> TabularMDP:
    """Corridor with a safe start and two absorbing danger sides.

    The objective pays 1 per step spent in either side; each side has its own
    indicator signal.  With thresholds at half the reachable side time, the
    two sided policies violate opposite constraints by the same amount, so
    their signed violations cancel exactly in the uniform mixture.
    """
    transitions = np.zeros((3, 3, 3))
    transitions[SAFE, STAY, SAFE] = 1.0
    transitions[SAFE, GO_LEFT, LEFT_STATE] = 1.0
    transitions[SAFE, GO_RIGHT, RIGHT_STATE] = 1.0
    transitions[LEFT_STATE, :, LEFT_STATE] = 1.0
    transitions[RIGHT_STATE, :, RIGHT_STATE] = 1.0
    rewards = np.zeros((3, 3, 3))
    rewards[0, LEFT_STATE, :] = 1.0
    rewards[0, RIGHT_STATE, :] = 1.0
    rewards[1, LEFT_STATE, :] = 1.0
    rewards[2, RIGHT_STATE, :] = 1.0
    init = np.array([1.0, 0.0, 0.0])
    return TabularMDP(transitions, rewards, init, horizon=horizon)


@dataclass(frozen=True)
class CancellationReport:
    """Why signed averaging hides violations that the positive part keeps."""

    horizon: int
    alphas: np.ndarray
    member_values: np.ndarray  # (2, 3): value vectors of the two sided policies
    signed_violations: np.ndarray  # (2, 2): V_i - alpha_i per member
    average_signed: np.ndarray  # (2,): mixture signed violations
    member_gplus: np.ndarray  # (2,): positive-part violation per member
    mixture_gplus: float


def cancellation_demo(horizon: int) -> CancellationReport:
    """Exact-occupancy contrast between the signed and positive-part forms."""
    if horizon < 2:
        raise ValueError("need horizon >= 2 to leave the safe state")
    mdp = safe_left_right_mdp(horizon)
    alphas = np.full(2, (horizon - 1) / 2.0)
    spec = ReformSpec(
        alpha=alphas, lambda_bar=0.0, horizon=horizon, epsilon=0.5, delta=0.5, rounds=1
    )
    actions = np.empty((horizon, 3), dtype=int)
    members = []
    for action in (GO_LEFT, GO_RIGHT):
        actions[:] = action
        members.append(TabularPolicy.deterministic(actions, 3))
    values = np.stack([exact_policy_values(mdp, member) for member in members])
    signed = values[:, 1:] - alphas
    gplus = np.array([positive_part_violation(row, spec)[1] for row in values])
    average = signed.mean(axis=0)
    mixture_values = values.mean(axis=0)
    _, mixture_gplus = positive_part_violation(mixture_values, spec)
    return CancellationReport(
        horizon=horizon,
        alphas=alphas,
        member_values=values,
        signed_violations=signed,
        average_signed=average,
        member_gplus=gplus,
        mixture_gplus=mixture_gplus,
    )


# --- report rendering -----------------------------------------------------


def write_estimate_table(estimates: Sequence[IterateEstimate], path: str | Path) -> None:
    """Audit CSV: one row per round with the estimate behind the selection."""
    rows = [
        [row.round, row.v0_hat, row.g_hat, row.lagrangian_hat, row.n_episodes]
        for row in estimates
    ]
    write_csv(path, ESTIMATE_COLUMNS, rows)


def format_certificate(report: ExtractionReport) -> str:
    """Human-readable certificate: selection, measured errors, verdict."""
    lines = [
        "single-iterate extraction certificate",
        f"  selected round        t* = {report.t_star}",
        f"  multiplier            lambda_bar = {report.lambda_bar:.6g}"
        + ("  (l1-bridged from vector multiplier)" if report.bridged_from_vector else ""),
        f"  multiplier cap        C = {report.cap:.6g}",
        f"  episodes per round    n = {report.estimates[0].n_episodes}",
        f"  game value (upper)    L* <= {report.game_value:.6g}"
        f"  at lambda = {report.game_value_lam:.6g}",
        f"  equilibrium error     nu = {report.nu:.6g}"
        f"  (learner {report.nu_learner:.6g}, regulator {report.nu_regulator:.6g})",
        f"  estimation error      eps_hat = {report.epsilon_measured:.6g}"
        f"  (budgeted for {report.epsilon_target:.6g})",
        f"  Jensen gap            J = {report.jensen:.6g}",
        f"  selected value        L(D_t*, lambda_bar) = {report.lagrangian_at_star:.6g}",
        f"  required bound        L* - (nu + 2 eps_hat + J) = {report.bound:.6g}",
        f"  verdict               {'HOLDS' if report.holds else 'FAILS'}"
        f"  (slack {report.slack:.6g})",
        f"  certifying policy     support member {report.support_member}"
        f"  with L = {report.certifying_lagrangian:.6g}",
    ]
    return "\n".join(lines)
