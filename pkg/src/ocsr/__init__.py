"""Symbolic derivation and numerical integration of Pontryagin extremals
for explicit, implicit (descriptor) and controlled-Lagrangian optimal
control problems."""

__version__ = "0.1.0"
