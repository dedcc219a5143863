"""Constraint-price side of the game: slack bookkeeping and projected subgradient steps.

The regulator maintains a vector of nonnegative multipliers confined to the
scaled simplex ``{lam >= 0, sum(lam) <= cap}`` and pushes them with online
gradient descent against the realized constraint slacks.  Slacks are oriented
so that positive means satisfied-with-margin and negative means violated, so a
violated constraint drives its multiplier up.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ConstraintSpec",
    "LagrangeWeights",
    "compute_slacks",
    "project_lambda",
    "ogd_step",
    "realized_regret",
    "lambda_diameter",
    "theoretical_step_size",
]


@dataclass(frozen=True)
class ConstraintSpec:
    """Thresholds and orientation for m constraints plus the multiplier budget.

    ``alpha[i]`` and ``sign[i]`` put constraint i in the canonical form
    ``sign[i] * value_i <= alpha[i]``; the slack ``alpha[i] - sign[i]*value_i``
    is then positive exactly when the constraint holds.  ``cap`` bounds the
    l1 norm of the multiplier vector.
    """

    alpha: np.ndarray
    sign: np.ndarray
    cap: float
    labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        alpha = np.asarray(self.alpha, dtype=np.float64)
        sign = np.asarray(self.sign, dtype=np.float64)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sign", sign)
        if alpha.ndim != 1 or sign.shape != alpha.shape:
            raise ValueError("alpha and sign must be 1-d vectors of equal length")
        if not np.all(np.isin(sign, (-1.0, 1.0))):
            raise ValueError("sign entries must be +1 or -1")
        if not (float(self.cap) > 0.0):
            raise ValueError(f"multiplier cap must be positive, got {self.cap}")
        object.__setattr__(self, "cap", float(self.cap))
        if self.labels and len(self.labels) != alpha.size:
            raise ValueError("labels length must match alpha")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"c{i}" for i in range(alpha.size)))

    @property
    def m(self) -> int:
        return int(self.alpha.size)


@dataclass(frozen=True)
class LagrangeWeights:
    """Validated multiplier vector: componentwise nonnegative, l1 norm within cap."""

    values: np.ndarray
    cap: float

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 1:
            raise ValueError("multipliers must form a 1-d vector")
        if np.any(values < 0.0):
            raise ValueError(f"negative multiplier in {values}")
        if float(values.sum()) > float(self.cap):
            raise ValueError(f"l1 norm {values.sum()} exceeds cap {self.cap}")


def compute_slacks(values: Sequence[float] | np.ndarray, spec: ConstraintSpec) -> np.ndarray:
    """Per-constraint slack vector from an (m+1)-vector of episodic values.

    ``values[0]`` is the primary objective and is ignored here; entries 1..m are
    the constraint values.  Returns ``alpha - sign * values[1:]``.
    """
    values = np.asarray(values, dtype=np.float64)
    if hasattr(values, "ndim") and values.ndim != 1:
        raise ValueError("values must be a flat vector")
    if values.size != spec.m + 1:
        raise ValueError(f"expected {spec.m + 1} values (objective + constraints), got {values.size}")
    return spec.alpha - spec.sign * values[1:]


def project_lambda(vec: np.ndarray, cap: float) -> np.ndarray:
    """Euclidean projection onto ``{lam >= 0, sum(lam) <= cap}``.

    Negative coordinates are clamped; if the clamped vector's l1 norm exceeds
    the cap, the sorted-threshold rule shifts every active coordinate down by
    the theta solving ``sum(max(v_i - theta, 0)) = cap``.  The output satisfies
    the set membership exactly (a final one-coordinate adjustment absorbs any
    last-ulp summation excess), which also makes the projection idempotent at
    the bit level.
    """
    if not cap > 0.0:
        raise ValueError("cap must be positive")
    v = np.maximum(np.asarray(vec, dtype=np.float64), 0.0)
    total = float(v.sum())
    if total <= cap:
        return v
    # sorted-threshold: find the largest k with u_k > (cumsum_k - cap) / k
    u = np.sort(v)[::-1]
    cumulative = np.cumsum(u) - cap
    ranks = np.arange(1, u.size + 1)
    k = int(np.nonzero(u * ranks > cumulative)[0][-1])
    theta = cumulative[k] / float(k + 1)
    out = np.maximum(v - theta, 0.0)
    excess = float(out.sum()) - cap
    if excess > 0.0:
        j = int(np.argmax(out))
        out[j] -= excess
    return out


def ogd_step(lam: np.ndarray, slacks: np.ndarray, eta: float, cap: float) -> np.ndarray:
    """One projected gradient step ``Proj(lam - eta * slacks)``.

    The regulator minimizes ``lam . slacks``, so satisfied constraints
    (positive slack) pull their multipliers toward zero and violations push
    them up until the projection bites.
    """
    lam = np.asarray(lam, dtype=np.float64)
    slacks = np.asarray(slacks, dtype=np.float64)
    if lam.shape != slacks.shape:
        raise ValueError("multiplier and slack vectors must have matching shape")
    if not eta > 0.0:
        raise ValueError("step size must be positive")
    return project_lambda(lam - eta * slacks, cap)


def realized_regret(multipliers: np.ndarray, slacks: np.ndarray, cap: float) -> float:
    """Regret of the played multiplier sequence against the best fixed vector.

    Both the played loss and the comparator loss share the policy-value terms,
    which cancel; what is left is ``sum_t lam_t . g_t`` minus the minimum of
    ``lam . sum_t g_t`` over the feasible set.  That minimum is attained at a
    vertex: the origin, or ``cap * e_i`` for the most-negative accumulated
    slack coordinate.
    """
    multipliers = np.atleast_2d(np.asarray(multipliers, dtype=np.float64))
    slacks = np.atleast_2d(np.asarray(slacks, dtype=np.float64))
    if multipliers.shape != slacks.shape:
        raise ValueError("need one multiplier vector per slack vector")
    played = float(np.sum(multipliers * slacks))
    accumulated = slacks.sum(axis=0)
    best_fixed = min(0.0, cap * float(accumulated.min()))
    return played - best_fixed


def lambda_diameter(cap: float, m: int) -> float:
    """Euclidean diameter of the truncated multiplier simplex."""
    if m >= 2:
        return cap * float(np.sqrt(2.0))
    return float(cap)


def theoretical_step_size(diameter: float, grad_bound: float, rounds: int) -> float:
    """The fixed step size giving the standard sqrt-horizon regret guarantee."""
    if diameter <= 0 or grad_bound <= 0 or rounds <= 0:
        raise ValueError("diameter, gradient bound and round count must be positive")
    return diameter / (grad_bound * float(np.sqrt(rounds)))
