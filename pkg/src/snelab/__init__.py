"""Stackelberg-Nash equilibria in episodic Markov games with myopic followers:
exact planning, stage-game solvers, optimistic online and pessimistic offline
least-squares value iteration, and reward-free exploration."""

__version__ = "0.1.0"
