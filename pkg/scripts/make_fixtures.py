#!/usr/bin/env python3
"""Generate the tabular fixture instances shipped in totegame/fixtures/.

Each fixture is a plain-text MDP plus a JSON sidecar naming the multiplier,
thresholds and gap tolerance for the conditional-gradient solver.  The script
re-derives the brute-force oracle value for each instance and prints the
constants that the test suite freezes, so fixtures can be regenerated and
re-verified from scratch at any time.
"""

import json
import sys
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO / "src"))
sys.path.insert(0, str(REPO / "tests"))

from totegame.frank_wolfe import fw_best_response
from totegame.mdp_core import TabularMDP, save_tabular_mdp
from oracles import grid_mixture_oracle

FIXDIR = REPO / "src" / "totegame" / "fixtures"


def walk_dynamics():
    """Two states; action 0 stays, action 1 swaps."""
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1.0
    P[0, 1, 1] = 1.0
    P[1, 0, 1] = 1.0
    P[1, 1, 0] = 1.0
    return P


def build():
    fixtures = {}

    # 1) pure objective: multiplier zero, constraint priced at nothing
    r = np.zeros((2, 2, 2))
    r[0] = [[0.1, 0.6], [0.9, 0.2]]
    r[1, 1, :] = 1.0  # time spent in state 1
    fixtures["fw_linear"] = (
        TabularMDP(walk_dynamics(), r, np.array([1.0, 0.0]), horizon=2),
        {"lam": 0.0, "alphas": [0.4], "eps": 1e-3},
    )

    # 2) slack constraint: threshold unreachable, optimum is the plain V0 vertex
    fixtures["fw_slack"] = (
        TabularMDP(walk_dynamics(), r.copy(), np.array([1.0, 0.0]), horizon=2),
        {"lam": 2.5, "alphas": [5.0], "eps": 1e-3},
    )

    # 3) priced violation: cheap multiplier, optimum sits inside the violated piece
    r3 = np.zeros((2, 2, 2))
    r3[0] = [[0.05, 0.55], [1.0, 0.1]]
    r3[1, 1, :] = 1.0
    fixtures["fw_priced"] = (
        TabularMDP(walk_dynamics(), r3, np.array([1.0, 0.0]), horizon=2),
        {"lam": 0.3, "alphas": [0.5], "eps": 1e-3},
    )

    # 4) two constraints, only the second one binds at the optimum
    r4 = np.zeros((3, 2, 2))
    r4[0] = [[0.05, 0.55], [1.0, 0.1]]
    r4[1, 1, :] = 1.0  # time in state 1
    r4[2, :, 1] = 1.0  # swap-action usage
    fixtures["fw_twoprice"] = (
        TabularMDP(walk_dynamics(), r4, np.array([1.0, 0.0]), horizon=2),
        {"lam": 0.25, "alphas": [1.6, 0.4], "eps": 1e-3},
    )

    # 5) five states, two of them unreachable, eight deterministic atoms.
    # The uniform start is infeasible, so the first vertex is the all-zeros
    # policy; from there the solver has to mix toward the optimum over many
    # rounds instead of jumping to it in one step.
    P5 = np.zeros((5, 2, 5))
    P5[:, :, 0] = 1.0  # horizon 1: successor irrelevant
    r5 = np.zeros((2, 5, 2))
    r5[0, :, 0] = [0.20, 0.30, 0.25, 0.0, 0.0]
    r5[0, :, 1] = [0.70, 0.10, 0.05, 0.0, 0.0]
    r5[1, :, 1] = 1.0  # action-1 usage
    mu5 = np.array([0.40, 0.35, 0.25, 0.0, 0.0])
    fixtures["fw_fivestate"] = (
        TabularMDP(P5, r5, mu5, horizon=1),
        {"lam": 0.7, "alphas": [0.45], "eps": 1e-3},
    )
    return fixtures


def main():
    FIXDIR.mkdir(parents=True, exist_ok=True)
    report = {}
    for name, (mdp, side) in build().items():
        save_tabular_mdp(mdp, FIXDIR / f"{name}.mdp.txt")
        (FIXDIR / f"{name}.json").write_text(json.dumps(side, indent=2) + "\n")
        lam, alphas = side["lam"], np.array(side["alphas"], dtype=float)
        best, weights, atoms = grid_mixture_oracle(mdp, lam, alphas)
        result = fw_best_response(mdp, lam, alphas, eps=side["eps"])
        support = int(np.sum(weights > 1e-6))
        report[name] = dict(
            oracle=best,
            fw_value=result.value,
            fw_iters=len(result.history),
            fw_gap=result.history[-1].gap,
            converged=result.converged,
            atoms=len(atoms),
            oracle_support=support,
        )
        print(
            f"{name:14s} atoms={len(atoms)} oracle={best:.10f} fw={result.value:.10f} "
            f"iters={len(result.history)} gap={result.history[-1].gap:.3e} "
            f"converged={result.converged} support={support}"
        )
    print("\nfrozen oracle constants:")
    for name, row in report.items():
        print(f'    "{name}": {row["oracle"]:.9f},')


if __name__ == "__main__":
    main()
