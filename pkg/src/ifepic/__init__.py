"""3-D electrostatic immersed-finite-element particle-in-cell simulator
with overlapping-Schwarz domain decomposition."""

__version__ = "0.1.0"
