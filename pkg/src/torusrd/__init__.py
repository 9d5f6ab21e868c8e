"""Pseudospectral simulation and verification toolkit for reaction-diffusion
systems on the torus driven by divergence-free transport noise."""

__version__ = "0.1.0"
