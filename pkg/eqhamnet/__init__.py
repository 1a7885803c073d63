"""Distributed SO(2)-equivariant graph network for Hamiltonian block prediction."""

__version__ = "0.1.0"
