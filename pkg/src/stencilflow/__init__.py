"""Finite-volume flow solver with classic and learned stencil interpolation.

The package simulates 2-D incompressible flow on a staggered periodic grid
(plus a 1-D chaotic test equation), where the convective flux is assembled
from face interpolations that are either hand-designed schemes (linear,
upwind, WENO5, Van-Leer) or produced by a convolutional network that maps
temporal features of the velocity history to constrained stencil weights.
Training differentiates through the unrolled solver.

Double precision is enabled globally; individual simulations pick their
working dtype through the arrays they carry.
"""

import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"

from . import grid, stencils, fvm2d, hippo, network, training, ks1d, datagen, metrics  # noqa: E402,F401
