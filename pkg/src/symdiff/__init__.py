"""Stochastic symmetrisation for equivariant diffusion on N-body point clouds."""

__version__ = "0.1.0"
