"""Constrained multi-objective RL as a repeated Lagrangian game.

A best-response learner (deep Q-learning on the warehouse floor, exact dynamic
programming or conditional-gradient ascent on tabular instances) plays against
a no-regret regulator that prices constraint violations.  The package also
ships the tabular verification testbed: positive-part reformulation, concave
best response, Hoeffding-budgeted single-iterate extraction, and brute-force
oracles behind each of them.
"""

__version__ = "0.1.0"
