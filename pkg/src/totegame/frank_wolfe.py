"""Conditional-gradient best response for the positive-part objective.

The learner-side problem on a tabular instance is to maximize the concave
function ``F(d) = <r_0, d> - lam * [max_i(<r_i, d> - alpha_i)]_+`` over the
occupancy polytope.  Linear maximization over that polytope is exact dynamic
programming, so each iteration takes a supergradient of F, asks backward
induction for the best vertex in that direction, measures the duality gap and
moves with the harmonic step schedule ``2 / (1 + w)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .mdp_core import (
    OccupancyMeasure,
    PolicyMixture,
    TabularMDP,
    TabularPolicy,
    backward_induction,
    occupancy_of_policy,
    value_from_occupancy,
)
from .util import write_csv

__all__ = [
    "FWIterate",
    "FWResult",
    "supergradient",
    "lmo",
    "fw_best_response",
    "policy_from_occupancy",
    "reform_value",
    "write_fw_log",
]

ARGMAX_TIE_TOL = 1e-12


@dataclass(frozen=True)
class FWIterate:
    iteration: int
    step_size: float
    value: float
    gap: float
    active_set: tuple[int, ...]  # empty when the feasible branch was taken


@dataclass(frozen=True)
class FWResult:
    occupancy: OccupancyMeasure
    policy: TabularPolicy  # conditional readout of the final occupancy
    mixture: PolicyMixture  # distinct visited atoms with their convex weights
    history: tuple[FWIterate, ...]
    value: float
    converged: bool


def reform_value(occupancy: OccupancyMeasure, lam: float, rewards: np.ndarray, alphas: np.ndarray) -> float:
    """``<r_0, d> - lam * [max_i(<r_i, d> - alpha_i)]_+`` for an occupancy point."""
    vals = value_from_occupancy(occupancy, rewards)
    worst = float(np.max(vals[1:] - alphas)) if alphas.size else 0.0
    return float(vals[0]) - lam * max(worst, 0.0)


def supergradient(
    occupancy: OccupancyMeasure,
    lam: float,
    rewards: np.ndarray,
    alphas: np.ndarray,
) -> tuple[np.ndarray, tuple[int, ...]]:
    """A supergradient of the positive-part objective at this occupancy.

    Returns a reward-shaped table plus the active constraint index set.  On the
    feasible side (worst violation <= 0, including exactly at the kink) the
    gradient is just ``r_0``; otherwise the tied worst constraints contribute
    ``-lam * r_j`` split equally across the argmax set.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    if rewards.shape[0] != alphas.size + 1:
        raise ValueError("need one reward table per constraint plus the objective")
    if lam < 0.0:
        raise ValueError("multiplier must be nonnegative")
    vals = value_from_occupancy(occupancy, rewards)
    violations = vals[1:] - alphas
    worst = float(np.max(violations)) if alphas.size else 0.0
    if worst <= 0.0:
        return rewards[0].copy(), ()
    active = tuple(int(j) for j in np.nonzero(violations >= worst - ARGMAX_TIE_TOL)[0])
    tied = rewards[1:][list(active)].mean(axis=0)
    return rewards[0] - lam * tied, active


def lmo(mdp: TabularMDP, direction: np.ndarray) -> tuple[OccupancyMeasure, TabularPolicy]:
    """Linear maximization over the occupancy polytope via backward induction.

    Ties in the dynamic program resolve to the lowest action index, so the
    all-zero direction returns the lexicographically first deterministic
    policy.  Returns the maximizing vertex and the policy generating it.
    """
    _, greedy = backward_induction(mdp, direction)
    policy = TabularPolicy.deterministic(greedy, mdp.n_actions)
    return occupancy_of_policy(mdp, policy), policy


def fw_best_response(
    mdp: TabularMDP,
    lam: float,
    alphas: np.ndarray,
    eps: float = 1e-3,
    max_iters: int | None = None,
) -> FWResult:
    """Maximize the positive-part objective with away-free Frank-Wolfe.

    Starts from the uniform policy's occupancy.  Stops when the duality gap
    ``<s, d_lmo - x>`` drops to ``eps`` (the gap upper-bounds the remaining
    suboptimality since F is concave) or after ``max_iters`` iterations,
    default ``ceil(10 / eps)``.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    if max_iters is None:
        max_iters = int(np.ceil(10.0 / eps))
    uniform = TabularPolicy.uniform(mdp.horizon, mdp.n_states, mdp.n_actions)
    x = occupancy_of_policy(mdp, uniform).q
    atom_index = {uniform.table.tobytes(): 0}
    atoms: list[TabularPolicy] = [uniform]
    weights = [1.0]
    history: list[FWIterate] = []
    converged = False
    for w in range(1, max_iters + 1):
        step = 2.0 / (1.0 + w)
        occ = OccupancyMeasure(x)
        grad, active = supergradient(occ, lam, mdp.rewards, alphas)
        vertex, vertex_policy = lmo(mdp, grad)
        gap = float(np.sum(grad * (vertex.totals - occ.totals)))
        history.append(
            FWIterate(iteration=w, step_size=step, value=reform_value(occ, lam, mdp.rewards, alphas), gap=gap, active_set=active)
        )
        if gap <= eps:
            converged = True
            break
        x = (1.0 - step) * x + step * vertex.q
        weights = [wt * (1.0 - step) for wt in weights]
        key = vertex_policy.table.tobytes()
        if key in atom_index:
            weights[atom_index[key]] += step
        else:
            atom_index[key] = len(atoms)
            atoms.append(vertex_policy)
            weights.append(step)
    final = OccupancyMeasure(x)
    keep = [i for i, wt in enumerate(weights) if wt > 0.0]
    kept = np.array([weights[i] for i in keep])
    mixture = PolicyMixture(tuple(atoms[i] for i in keep), kept / kept.sum())
    return FWResult(
        occupancy=final,
        policy=policy_from_occupancy(mdp, final),
        mixture=mixture,
        history=tuple(history),
        value=reform_value(final, lam, mdp.rewards, alphas),
        converged=converged,
    )


def policy_from_occupancy(mdp: TabularMDP, occupancy: OccupancyMeasure, stationary: bool = False) -> TabularPolicy:
    """Conditional-probability readout ``pi_h(a|s) = q_h(s,a) / sum_a q_h(s,a)``.

    States with no visitation mass get the uniform action distribution.  The
    ``stationary`` variant conditions on the summed occupancy instead; it does
    not round-trip for mixtures whose members differ across steps, so the
    per-step readout is the default.
    """
    if stationary:
        totals = occupancy.totals
        table = np.broadcast_to(_conditional(totals), (mdp.horizon, mdp.n_states, mdp.n_actions)).copy()
        return TabularPolicy(table)
    table = np.stack([_conditional(occupancy.q[h]) for h in range(occupancy.horizon)])
    return TabularPolicy(table)


def _conditional(mass: np.ndarray) -> np.ndarray:
    mass = np.maximum(mass, 0.0)
    row = mass.sum(axis=1, keepdims=True)
    n_actions = mass.shape[1]
    with np.errstate(invalid="ignore", divide="ignore"):
        table = np.where(row > 0.0, mass / np.where(row > 0.0, row, 1.0), 1.0 / n_actions)
    # renormalize away accumulated float error so the policy validates cleanly
    return table / table.sum(axis=1, keepdims=True)


def write_fw_log(history: Sequence[FWIterate], path: str | Path) -> None:
    """Per-iteration CSV: iteration, step size, objective value, duality gap, active set."""
    write_csv(
        path,
        ["iteration", "step_size", "value", "gap", "active_set"],
        [[it.iteration, it.step_size, it.value, it.gap, " ".join(map(str, it.active_set))] for it in history],
    )
