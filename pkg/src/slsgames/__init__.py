"""Equilibrium seeking for constrained output-feedback dynamic games.

The package finds variational generalized feedback Nash equilibria of
linear stochastic, partially observed dynamic games by parametrizing each
player's policy through its finite-impulse-response closed-loop maps,
iterating forward-backward equilibrium seeking with a coordinated
projection, and validating reconstructed controllers in a seeded simulator.
"""

__version__ = "0.1.0"
