"""Space-time minimization of weighted inertia-dissipation-energy functionals
for unsteady incompressible power-law channel flows."""

__version__ = "0.1.0"
