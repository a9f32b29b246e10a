"""Posterior sampling for SDE-driven inverse problems via Hamilton-Jacobi controls.

Stage 1 builds the control ``grad_x S`` (closed form, Riccati ODEs or a
trained score network); stage 2 simulates the controlled SDE backward from
an observation to draw posterior samples of earlier states.
"""

__version__ = "0.1.0"
